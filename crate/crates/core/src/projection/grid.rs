use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Perception range `[x_min, y_min, z_min, x_max, y_max, z_max]` in metres
/// and a cubic voxel edge.
///
/// Voxel `(x, y, z)` is flattened as `(x * L + y) * H + z`; a BEV cell
/// `(x, y)` as `x * L + y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub range: [f32; 6],
    pub voxel: f32,
}

impl GridSpec {
    pub fn new(range: [f32; 6], voxel: f32) -> Result<Self> {
        let spec = Self { range, voxel };
        grid_dims(&spec)?;
        Ok(spec)
    }

    pub fn min(&self) -> [f64; 3] {
        [self.range[0] as f64, self.range[1] as f64, self.range[2] as f64]
    }

    pub fn max(&self) -> [f64; 3] {
        [self.range[3] as f64, self.range[4] as f64, self.range[5] as f64]
    }

    /// `[W, L, H]`; see [`grid_dims`].
    pub fn dims(&self) -> Result<[usize; 3]> {
        grid_dims(self)
    }

    pub fn num_voxels(&self) -> Result<usize> {
        let [w, l, h] = self.dims()?;
        Ok(w * l * h)
    }

    pub fn layout(&self) -> Result<GridLayout> {
        let dims = self.dims()?;
        Ok(GridLayout { min: self.min(), voxel: self.voxel as f64, dims })
    }
}

/// Validated spec with the derived dimensions cached, for hot loops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridLayout {
    pub min: [f64; 3],
    pub voxel: f64,
    pub dims: [usize; 3],
}

impl GridLayout {
    /// Integer voxel coordinate by `floor((p - min) / voxel)`, if in range.
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.min[a]) / self.voxel).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    pub fn center(&self, idx: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.min[a] + (idx[a] as f64 + 0.5) * self.voxel)
    }

    pub fn flat(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn unflat(&self, i: usize) -> [usize; 3] {
        let h = self.dims[2];
        let l = self.dims[1];
        [i / (l * h), (i / h) % l, i % h]
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn num_cells(&self) -> usize {
        self.dims[0] * self.dims[1]
    }
}

/// Per-axis `extent / voxel`, accepted when within `1e-6` (relative to the
/// quotient, floored at 1) of an integer.
pub fn grid_dims(spec: &GridSpec) -> Result<[usize; 3]> {
    let v = spec.voxel as f64;
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("voxel size must be positive, got {}", spec.voxel)));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let (lo, hi) = (spec.range[a] as f64, spec.range[a + 3] as f64);
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("axis {a}: max {hi} must exceed min {lo}")));
        }
        let q = (hi - lo) / v;
        let r = q.round();
        if (q - r).abs() > 1e-6 * q.abs().max(1.0) || r < 1.0 {
            return Err(Error::Config(format!(
                "axis {a}: extent {} is not a multiple of voxel {}",
                hi - lo,
                spec.voxel
            )));
        }
        dims[a] = r as usize;
    }
    Ok(dims)
}
