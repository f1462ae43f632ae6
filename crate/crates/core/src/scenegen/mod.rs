//! Synthetic scenes: box worlds on a ground plane, lidar and camera
//! simulation, ground-truth voxelisation and camera visibility.

mod raycast;
mod scene;
mod semgrid;
mod sensors;
mod visibility;

use diffkit::{Exec, Tensor};

pub use raycast::{cast_ray, cloud_tensor, raycast_lidar, render_camera, shade, Hit, PointCloud, Render};
pub use scene::{build_scene, Box3, ClassSpec, Ground, GroundSpec, Scene, SceneConfig};
pub use semgrid::{voxelize_gt, SemGrid, GRID_MAGIC, GRID_VERSION};
pub use sensors::{CameraSpec, LidarSpec, SensorRig};
pub use visibility::{compute_visibility, compute_visibility_with, sample_points, segment_is_clear};

use crate::error::Result;
use crate::projection::GridSpec;

/// Independent sub-seed for stream `k` of a scene seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything simulated for one scene.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub seed: u64,
    pub scene: Scene,
    pub points: PointCloud,
    /// `[cameras, 3, H, W]`
    pub images: Tensor,
    /// Ground truth with the camera visibility mask filled in.
    pub grid: SemGrid,
}

pub fn simulate(cfg: &SceneConfig, rig: &SensorRig, spec: &GridSpec, seed: u64) -> Result<SceneSample> {
    simulate_with(Exec::Sequential, cfg, rig, spec, seed)
}

pub fn simulate_with(exec: Exec, cfg: &SceneConfig, rig: &SensorRig, spec: &GridSpec, seed: u64) -> Result<SceneSample> {
    rig.validate()?;
    let scene = build_scene(cfg, derive_seed(seed, 0))?;
    let points = raycast_lidar(&scene, &rig.lidar, derive_seed(seed, 1))?;
    let mut planes = Vec::new();
    let (mut h, mut w) = (0, 0);
    for (k, cam) in rig.cameras.iter().enumerate() {
        let r = render_camera(&scene, cam)?;
        (h, w) = (r.height, r.width);
        planes.extend_from_slice(shade(&r, derive_seed(seed, 2 + k as u64)).data());
    }
    let images = Tensor::new(&[rig.cameras.len(), 3, h, w], planes)?;
    let mut grid = voxelize_gt(&scene, spec)?;
    grid.visibility = compute_visibility_with(exec, &grid, &rig.cameras)?;
    Ok(SceneSample { seed, scene, points, images, grid })
}
