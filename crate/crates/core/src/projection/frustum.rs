use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::CameraSpec;

/// Evenly spaced optical depths `min, ..., max` (both ends included).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub count: usize,
    pub min: f32,
    pub max: f32,
}

impl Default for DepthBins {
    fn default() -> Self {
        Self { count: 32, min: 1.0, max: 45.0 }
    }
}

impl DepthBins {
    pub fn depths(&self) -> Result<Vec<f32>> {
        if self.count == 0 || !(self.min > 0.0) || (self.count > 1 && !(self.max > self.min)) {
            return Err(Error::Config(format!("invalid depth bins {:?}", self)));
        }
        if self.count == 1 {
            return Ok(vec![self.min]);
        }
        let step = (self.max as f64 - self.min as f64) / (self.count - 1) as f64;
        Ok((0..self.count).map(|i| (self.min as f64 + i as f64 * step) as f32).collect())
    }
}

/// Image column (or row) sampled for output index `i` at `stride`, and its
/// pixel-centre coordinate.
pub fn sample_index(i: usize, stride: usize) -> usize {
    i * stride + stride / 2
}

pub fn sample_coord(i: usize, stride: usize) -> f64 {
    sample_index(i, stride) as f64 + 0.5
}

/// Ego-frame points for every `(camera, row, col, bin)`, flattened in that
/// order. The feature row (pixel) of point `p` is `p / bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrustumCoords {
    pub points: Vec<[f32; 3]>,
    pub cams: usize,
    pub rows: usize,
    pub cols: usize,
    pub bins: usize,
}

impl FrustumCoords {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_pixels(&self) -> usize {
        self.cams * self.rows * self.cols
    }

    /// `(camera, row, col, bin)` of point `p`.
    pub fn source(&self, p: usize) -> (usize, usize, usize, usize) {
        let bin = p % self.bins;
        let pix = p / self.bins;
        let col = pix % self.cols;
        let row = (pix / self.cols) % self.rows;
        (pix / (self.cols * self.rows), row, col, bin)
    }

    /// Mirrors points across the planes `x = cx` and/or `y = cy`.
    pub fn mirrored(&self, flip_x: Option<f32>, flip_y: Option<f32>) -> Self {
        let mut out = self.clone();
        for p in &mut out.points {
            if let Some(c) = flip_x {
                p[0] = 2.0 * c - p[0];
            }
            if let Some(c) = flip_y {
                p[1] = 2.0 * c - p[1];
            }
        }
        out
    }
}

/// Lifts every sampled pixel of one camera to each depth in `depth_bins`.
pub fn gen_frustum(cam: &CameraSpec, depth_bins: &[f32], pixel_stride: usize) -> Result<FrustumCoords> {
    gen_frustum_multi(std::slice::from_ref(cam), depth_bins, pixel_stride)
}

pub fn gen_frustum_multi(cams: &[CameraSpec], depth_bins: &[f32], pixel_stride: usize) -> Result<FrustumCoords> {
    if depth_bins.is_empty() {
        return Err(Error::Config("no depth bins".into()));
    }
    if !(depth_bins[0] > 0.0) || depth_bins.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("depth bins must be positive and strictly increasing".into()));
    }
    if pixel_stride == 0 {
        return Err(Error::Config("pixel stride must be positive".into()));
    }
    let Some(first) = cams.first() else {
        return Err(Error::Config("at least one camera is required".into()));
    };
    for c in cams {
        c.validate()?;
        if (c.width, c.height) != (first.width, first.height) {
            return Err(Error::Config("all cameras must share one image size".into()));
        }
    }
    let rows = first.height / pixel_stride;
    let cols = first.width / pixel_stride;
    let mut points = Vec::with_capacity(cams.len() * rows * cols * depth_bins.len());
    for cam in cams {
        for r in 0..rows {
            let v = sample_coord(r, pixel_stride);
            for c in 0..cols {
                let u = sample_coord(c, pixel_stride);
                for &d in depth_bins {
                    let p = cam.unproject(u, v, d as f64);
                    points.push([p[0] as f32, p[1] as f32, p[2] as f32]);
                }
            }
        }
    }
    Ok(FrustumCoords { points, cams: cams.len(), rows, cols, bins: depth_bins.len() })
}
