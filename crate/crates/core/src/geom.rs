//! Small fixed-size vector helpers and rigid transforms (ego frame: x
//! forward, y left, z up).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// `p_out = rotation * p_in + translation`; rotation is row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rigid {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Rigid {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        add(self.rotate(p), self.translation)
    }

    pub fn rotate(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        [dot(r[0], p), dot(r[1], p), dot(r[2], p)]
    }

    /// Applies the inverse transform.
    pub fn apply_inverse(&self, p: Vec3) -> Vec3 {
        self.rotate_inverse(sub(p, self.translation))
    }

    pub fn rotate_inverse(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        [0, 1, 2].map(|j| r[0][j] * p[0] + r[1][j] * p[1] + r[2][j] * p[2])
    }

    /// Orthonormal with determinant +1, to within `1e-9`.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let col = |k: usize| [r[0][k], r[1][k], r[2][k]];
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot(col(i), col(j)) - want).abs() > 1e-9 {
                    return Err(Error::Config("extrinsic rotation is not orthonormal".into()));
                }
            }
        }
        let det = dot(r[0], cross(r[1], r[2]));
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("extrinsic rotation has determinant {det}")));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("extrinsic translation is not finite".into()));
        }
        Ok(())
    }
}
