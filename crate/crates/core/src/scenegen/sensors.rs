use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{normalize, Rigid, Vec3};

/// Pinhole camera. The extrinsic maps camera coordinates (z forward,
/// x right, y down) into the ego frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub extrinsic: Rigid,
}

impl CameraSpec {
    /// Level camera at `position` looking along ego heading `yaw`, with the
    /// principal point at the image centre.
    pub fn looking(yaw: f64, position: Vec3, fx: f64, fy: f64, width: usize, height: usize) -> Self {
        let (c, s) = (yaw.cos(), yaw.sin());
        let right = [s, -c, 0.0];
        let down = [0.0, 0.0, -1.0];
        let fwd = [c, s, 0.0];
        let rotation = [
            [right[0], down[0], fwd[0]],
            [right[1], down[1], fwd[1]],
            [right[2], down[2], fwd[2]],
        ];
        Self {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            extrinsic: Rigid { rotation, translation: position },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive: {} {}", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera image must be non-empty".into()));
        }
        self.extrinsic.validate()
    }

    pub fn origin(&self) -> Vec3 {
        self.extrinsic.translation
    }

    /// Ego-frame point at optical depth `d` behind pixel coordinate `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Vec3 {
        let cam = [(u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d];
        self.extrinsic.apply(cam)
    }

    /// `(u, v, depth)` of an ego-frame point, or `None` behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.extrinsic.apply_inverse(p);
        if c[2] <= 0.0 {
            return None;
        }
        Some((self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy, c[2]))
    }

    /// In front of the camera and inside the image rectangle.
    pub fn sees(&self, p: Vec3) -> bool {
        match self.project(p) {
            Some((u, v, _)) => u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64,
            None => false,
        }
    }

    /// Unit ego-frame direction through pixel coordinate `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        let d = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        normalize(self.extrinsic.rotate(d))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub origin: Vec3,
    /// Ring elevation angles in radians.
    pub elevations: Vec<f64>,
    pub azimuth_step: f64,
    pub max_range: f64,
    /// Range noise; draws are truncated at three standard deviations.
    pub noise_sigma: f64,
}

impl LidarSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_range > 0.0) {
            return Err(Error::Config("lidar max range must be positive".into()));
        }
        if self.elevations.is_empty() {
            return Err(Error::Config("lidar needs at least one ring".into()));
        }
        if !(self.azimuth_step > 0.0) {
            return Err(Error::Config("lidar azimuth step must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("lidar noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Unit beam directions, ring-major.
    pub fn directions(&self) -> Vec<Vec3> {
        let n_az = (std::f64::consts::TAU / self.azimuth_step).round().max(1.0) as usize;
        let mut out = Vec::with_capacity(n_az * self.elevations.len());
        for &e in &self.elevations {
            for k in 0..n_az {
                let a = k as f64 * self.azimuth_step;
                out.push([e.cos() * a.cos(), e.cos() * a.sin(), e.sin()]);
            }
        }
        out
    }
}

/// Sensor suite shared by every scene of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorRig {
    pub cameras: Vec<CameraSpec>,
    pub lidar: LidarSpec,
}

impl SensorRig {
    /// Front and rear cameras (about 106 degrees horizontal field of view)
    /// and a 16-ring lidar.
    pub fn desk() -> Self {
        let (w, h, f) = (96, 32, 36.0);
        let cameras = vec![
            CameraSpec::looking(0.0, [0.3, 0.02, 0.05], f, f, w, h),
            CameraSpec::looking(std::f64::consts::PI, [-0.3, -0.02, 0.05], f, f, w, h),
        ];
        let elevations = (0..16).map(|i| (-25.0 + 2.0 * i as f64).to_radians()).collect();
        let lidar = LidarSpec {
            origin: [0.0, 0.0, 0.3],
            elevations,
            azimuth_step: 1.0f64.to_radians(),
            max_range: 40.0,
            noise_sigma: 0.02,
        };
        Self { cameras, lidar }
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.cameras {
            c.validate()?;
        }
        self.lidar.validate()
    }
}
