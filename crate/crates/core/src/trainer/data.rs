use diffkit::{Exec, Tensor};

use super::config::DataConfig;
use crate::error::Result;
use crate::par::map_range;
use crate::projection::{pillarize, GridSpec, Pillars};
use crate::scenegen::{derive_seed, simulate_with, PointCloud, SceneSample, SemGrid};

/// Offset separating validation scene seeds from training ones.
const VAL_STREAM: u64 = 1 << 32;

/// One simulated scene as the models consume it.
#[derive(Clone, Debug)]
pub struct Sample {
    pub seed: u64,
    /// `[cams, 3, H, W]`
    pub images: Tensor,
    pub points: PointCloud,
    pub grid: SemGrid,
}

impl From<SceneSample> for Sample {
    fn from(s: SceneSample) -> Self {
        Self { seed: s.seed, images: s.images, points: s.points, grid: s.grid }
    }
}

/// A sample seen through one of the four mirror augmentations.
pub struct View {
    pub flip: [bool; 2],
    pub pillars: Pillars,
    pub grid: SemGrid,
}

impl Sample {
    pub fn view(&self, flip: [bool; 2]) -> Result<View> {
        if flip == [false, false] {
            return Ok(View { flip, pillars: pillarize(&self.points, &self.grid.spec)?, grid: self.grid.clone() });
        }
        let spec = self.grid.spec;
        let (lo, hi) = (spec.min(), spec.max());
        let mid = [((lo[0] + hi[0]) / 2.0) as f32, ((lo[1] + hi[1]) / 2.0) as f32];
        let points: PointCloud = self
            .points
            .iter()
            .map(|p| {
                let mut q = *p;
                for a in 0..2 {
                    if flip[a] {
                        q[a] = 2.0 * mid[a] - q[a];
                    }
                }
                q
            })
            .collect();
        Ok(View { flip, pillars: pillarize(&points, &spec)?, grid: self.grid.mirrored(flip[0], flip[1]) })
    }

    /// Labels as class indices and the camera-visibility mask.
    pub fn targets(grid: &SemGrid) -> (Vec<usize>, &[bool]) {
        (grid.labels.iter().map(|&l| l as usize).collect(), &grid.visibility)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

pub fn train_seed(cfg: &DataConfig, i: usize) -> u64 {
    derive_seed(cfg.seed, i as u64)
}

pub fn val_seed(cfg: &DataConfig, i: usize) -> u64 {
    derive_seed(cfg.seed, VAL_STREAM + i as u64)
}

/// Simulates the training and validation scenes; scenes are independent, so
/// `exec` decides whether they are generated concurrently.
pub fn generate_dataset(exec: Exec, cfg: &DataConfig, grid: &GridSpec) -> Result<Dataset> {
    let make = |seed: u64| simulate_with(Exec::Sequential, &cfg.scene, &cfg.rig, grid, seed).map(Sample::from);
    let train = map_range(exec, cfg.train_scenes, |i| make(train_seed(cfg, i))).into_iter().collect::<Result<_>>()?;
    let val = map_range(exec, cfg.val_scenes, |i| make(val_seed(cfg, i))).into_iter().collect::<Result<_>>()?;
    Ok(Dataset { train, val })
}
