use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{DistillConfig, SupervisedConfig};
use crate::occnets::NetConfig;
use crate::scenegen::{SceneConfig, SensorRig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub rig: SensorRig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_scenes: 100, val_scenes: 50, seed: 0, scene: SceneConfig::default(), rig: SensorRig::desk() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 3e-3, betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub teacher: NetConfig,
    pub student: NetConfig,
    pub supervised: SupervisedConfig,
    pub distill: DistillConfig,
    pub optim: OptimConfig,
    pub epochs: usize,
    /// Samples drawn per epoch; a full pass over the training scenes when
    /// absent.
    pub steps_per_epoch: Option<usize>,
    /// Samples whose gradients are averaged per optimiser step.
    pub batch_size: usize,
    pub label_fraction: f64,
    /// Fractions run by the label-efficiency grid.
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub ema_decay: Option<f32>,
    /// Random mirroring of points, labels and camera geometry.
    pub flip_aug: bool,
}

/// Cross-entropy factors per logit: objects, then surfaces, then empty.
pub const DEFAULT_CLASS_WEIGHTS: [f32; 6] = [5.0, 6.0, 6.0, 3.0, 3.0, 1.0];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            teacher: NetConfig::default(),
            student: NetConfig::default(),
            supervised: SupervisedConfig {
                all_losses: true,
                class_weights: Some(DEFAULT_CLASS_WEIGHTS.to_vec()),
                ..SupervisedConfig::default()
            },
            distill: DistillConfig::default(),
            optim: OptimConfig::default(),
            epochs: 10,
            steps_per_epoch: None,
            batch_size: 1,
            label_fraction: 1.0,
            fractions: vec![0.1, 0.2, 0.4, 1.0],
            seeds: vec![0, 1, 2],
            ema_decay: None,
            flip_aug: true,
        }
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::Config(format!("label fraction {f} is outside (0, 1]")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.supervised.weights.validate()?;
        self.distill.validate()?;
        self.data.rig.validate()?;
        self.data.scene.validate()?;
        if self.teacher.grid != self.student.grid {
            return Err(Error::Config("teacher and student grids differ".into()));
        }
        if self.teacher.num_classes != self.student.num_classes {
            return Err(Error::Config("teacher and student class counts differ".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::Config("epochs, batch_size and steps_per_epoch must be positive".into()));
        }
        if let Some(w) = &self.supervised.class_weights {
            if w.len() != self.student.num_classes || w.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config("class weights need one non-negative value per logit".into()));
            }
        }
        if self.data.train_scenes == 0 {
            return Err(Error::Config("no training scenes".into()));
        }
        if !(self.optim.lr > 0.0) || self.optim.weight_decay < 0.0 {
            return Err(Error::Config("invalid optimiser settings".into()));
        }
        check_fraction(self.label_fraction)?;
        for f in &self.fractions {
            check_fraction(*f)?;
        }
        if self.fractions.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("fractions must be strictly increasing".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..=1.0).contains(&d) {
                return Err(Error::Config(format!("EMA decay {d} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON encoding, hex.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Scenes kept labeled at `fraction`: `max(1, floor(n · fraction))` of them,
/// the first ones of a seeded permutation, so smaller fractions select
/// subsets of larger ones.
pub fn labeled_scenes(n: usize, fraction: f64, seed: u64) -> Result<Vec<bool>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    check_fraction(fraction)?;
    if n == 0 {
        return Err(Error::Config("no scenes to label".into()));
    }
    let k = ((n as f64 * fraction + 1e-9).floor() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![false; n];
    for &i in &order[..k] {
        out[i] = true;
    }
    Ok(out)
}

/// Applies `key.path=value` edits to a JSON document. Values parse as JSON
/// when possible and fall back to strings.
pub fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            serde_json::Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| serde_json::Value::Object(Default::default()))
            }
            serde_json::Value::Array(items) => {
                let at: usize = part.parse().map_err(|_| Error::Config(format!("`{part}` in `{key}` is not an index")))?;
                let len = items.len();
                let slot = items.get_mut(at).ok_or_else(|| Error::Config(format!("index {at} out of range {len} in `{key}`")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("`{key}` does not name a field"))),
        };
    }
    Err(Error::Config("empty override key".into()))
}
