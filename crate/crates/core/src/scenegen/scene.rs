use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classes::{self, BARRIER, CAR, PEDESTRIAN, ROAD, TERRAIN};
use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Box rotated by `yaw` about the vertical axis through its centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
    pub class: u8,
}

impl Box3 {
    /// Ego point in box coordinates (axes aligned with the box edges).
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    pub fn dir_to_local(&self, d: Vec3) -> Vec3 {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    pub fn half(&self) -> Vec3 {
        [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0]
    }

    /// Strict interior test.
    pub fn contains(&self, p: Vec3) -> bool {
        let q = self.to_local(p);
        let h = self.half();
        (0..3).all(|a| q[a].abs() < h[a])
    }

    /// Signed distance to the surface (negative inside).
    pub fn sdf(&self, p: Vec3) -> f64 {
        let q = self.to_local(p);
        let h = self.half();
        let d = [q[0].abs() - h[0], q[1].abs() - h[1], q[2].abs() - h[2]];
        let outside = d.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
        let inside = d[0].max(d[1]).max(d[2]).min(0.0);
        outside + inside
    }

    /// Horizontal footprint radius (half diagonal).
    pub fn radius(&self) -> f64 {
        (self.size[0].powi(2) + self.size[1].powi(2)).sqrt() / 2.0
    }

    /// Smallest positive ray parameter at which `o + t d` meets the surface.
    pub fn intersect(&self, o: Vec3, d: Vec3) -> Option<f64> {
        let lo = self.to_local(o);
        let ld = self.dir_to_local(d);
        let h = self.half();
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            if ld[a] == 0.0 {
                if lo[a].abs() > h[a] {
                    return None;
                }
                continue;
            }
            let (ta, tb) = ((-h[a] - lo[a]) / ld[a], (h[a] - lo[a]) / ld[a]);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        if t0 > t1 {
            return None;
        }
        if t0 > 0.0 {
            Some(t0)
        } else if t1 > 0.0 {
            Some(t1)
        } else {
            None
        }
    }
}

/// Infinite horizontal ground; voxels within `thickness` below `height`
/// belong to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ground {
    pub height: f64,
    pub thickness: f64,
    pub class: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Box3>,
    pub ground: Ground,
    /// `[x_min, y_min, x_max, y_max]`
    pub bounds: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class: u8,
    pub weight: f64,
    pub size_min: Vec3,
    pub size_max: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundSpec {
    pub class: u8,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Inclusive `[min, max]` object count.
    pub object_count: [usize; 2],
    pub palette: Vec<ClassSpec>,
    pub ground: Vec<GroundSpec>,
    pub ground_height: f64,
    pub ground_thickness: f64,
    pub bounds: [f64; 4],
    /// Objects keep this horizontal distance from the ego origin.
    pub clear_radius: f64,
    /// Placement attempts per object before giving up.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            object_count: [6, 14],
            palette: vec![
                ClassSpec { class: CAR, weight: 0.5, size_min: [3.8, 1.7, 1.4], size_max: [4.8, 2.0, 1.7] },
                ClassSpec { class: PEDESTRIAN, weight: 0.25, size_min: [0.6, 0.6, 1.6], size_max: [0.9, 0.9, 1.9] },
                ClassSpec { class: BARRIER, weight: 0.25, size_min: [0.5, 2.0, 0.9], size_max: [0.7, 4.0, 1.2] },
            ],
            ground: vec![GroundSpec { class: ROAD, weight: 0.5 }, GroundSpec { class: TERRAIN, weight: 0.5 }],
            ground_height: -1.5,
            ground_thickness: 0.5,
            bounds: [-16.0, -16.0, 16.0, 16.0],
            clear_radius: 2.5,
            max_retries: 200,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.object_count[0] > self.object_count[1] {
            return Err(Error::Config(format!("object count range {:?} is empty", self.object_count)));
        }
        let weights_ok = |w: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = w.collect();
            !v.is_empty() && v.iter().all(|x| *x >= 0.0 && x.is_finite()) && v.iter().any(|x| *x > 0.0)
        };
        if self.object_count[1] > 0 && !weights_ok(&mut self.palette.iter().map(|c| c.weight)) {
            return Err(Error::Config("palette weights must be non-negative and not all zero".into()));
        }
        for c in &self.palette {
            if !classes::is_thing(c.class) {
                return Err(Error::Config(format!("palette class {} is not an object class", c.class)));
            }
            for a in 0..3 {
                if !(c.size_min[a] > 0.0 && c.size_min[a] <= c.size_max[a]) {
                    return Err(Error::Config(format!("class {} size range is empty", c.class)));
                }
            }
        }
        if !weights_ok(&mut self.ground.iter().map(|g| g.weight)) {
            return Err(Error::Config("ground weights must be non-negative and not all zero".into()));
        }
        if let Some(g) = self.ground.iter().find(|g| !classes::is_stuff(g.class)) {
            return Err(Error::Config(format!("ground class {} is not a surface class", g.class)));
        }
        let b = self.bounds;
        if !(b[2] > b[0] && b[3] > b[1]) {
            return Err(Error::Config(format!("scene bounds {:?} are empty", b)));
        }
        if !(self.ground_thickness > 0.0) {
            return Err(Error::Config("ground thickness must be positive".into()));
        }
        Ok(())
    }
}

/// Samples a scene. Each object draws its class first, then retries only its
/// pose, so rejections do not bias class frequencies.
pub fn build_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground_dist = WeightedIndex::new(cfg.ground.iter().map(|g| g.weight))
        .map_err(|e| Error::Config(format!("ground weights: {e}")))?;
    let ground = Ground {
        height: cfg.ground_height,
        thickness: cfg.ground_thickness,
        class: cfg.ground[ground_dist.sample(&mut rng)].class,
    };
    let n = rng.random_range(cfg.object_count[0]..=cfg.object_count[1]);
    let mut objects: Vec<Box3> = Vec::with_capacity(n);
    if n > 0 {
        let class_dist = WeightedIndex::new(cfg.palette.iter().map(|c| c.weight))
            .map_err(|e| Error::Config(format!("palette weights: {e}")))?;
        for k in 0..n {
            let spec = &cfg.palette[class_dist.sample(&mut rng)];
            let size: Vec3 = [0, 1, 2].map(|a| {
                if spec.size_max[a] > spec.size_min[a] {
                    rng.random_range(spec.size_min[a]..spec.size_max[a])
                } else {
                    spec.size_min[a]
                }
            });
            let yaw = rng.random_range(0.0..std::f64::consts::PI);
            let mut b = Box3 { center: [0.0; 3], size, yaw, class: spec.class };
            let r = b.radius();
            let (x0, x1) = (cfg.bounds[0] + r, cfg.bounds[2] - r);
            let (y0, y1) = (cfg.bounds[1] + r, cfg.bounds[3] - r);
            if !(x1 > x0 && y1 > y0) {
                return Err(Error::Placement(format!("object {k} (class {}) does not fit in bounds", b.class)));
            }
            let mut placed = false;
            for _ in 0..cfg.max_retries {
                let (x, y) = (rng.random_range(x0..x1), rng.random_range(y0..y1));
                if x.hypot(y) < cfg.clear_radius + r {
                    continue;
                }
                let clear = objects.iter().all(|o| {
                    let gap = (o.center[0] - x).hypot(o.center[1] - y);
                    gap > o.radius() + r
                });
                if clear {
                    b.center = [x, y, cfg.ground_height + size[2] / 2.0];
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Placement(format!(
                    "could not place object {k} of {n} after {} attempts",
                    cfg.max_retries
                )));
            }
            objects.push(b);
        }
    }
    Ok(Scene { objects, ground, bounds: cfg.bounds })
}
