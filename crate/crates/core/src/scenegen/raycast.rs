use diffkit::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::scene::Scene;
use super::sensors::{CameraSpec, LidarSpec};
use crate::classes::{self, NUM_CLASSES, VOID};
use crate::error::Result;
use crate::geom::{add, scale, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub class: u8,
}

/// Nearest surface along `o + t d` with `0 < t <= max_t`. `d` need not be
/// normalised; `t` is in units of `|d|`.
pub fn cast_ray(scene: &Scene, o: Vec3, d: Vec3, max_t: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |t: f64, class: u8| {
        if t > 0.0 && t <= max_t && best.is_none_or(|b| t < b.t) {
            best = Some(Hit { t, class });
        }
    };
    if d[2] < 0.0 && o[2] > scene.ground.height {
        consider((scene.ground.height - o[2]) / d[2], scene.ground.class);
    }
    for b in &scene.objects {
        if let Some(t) = b.intersect(o, d) {
            consider(t, b.class);
        }
    }
    best
}

/// `[x, y, z, intensity]` per return.
pub type PointCloud = Vec<[f32; 4]>;

pub fn cloud_tensor(points: &PointCloud) -> Tensor {
    let data = points.iter().flat_map(|p| p.iter().copied()).collect();
    Tensor::new(&[points.len(), 4], data).expect("4 values per point")
}

/// Casts every beam; ranges get truncated Gaussian noise and intensities a
/// class constant plus uniform noise.
pub fn raycast_lidar(scene: &Scene, lidar: &LidarSpec, seed: u64) -> Result<PointCloud> {
    lidar.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (lidar.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, lidar.noise_sigma).expect("positive sigma"));
    let mut out = Vec::new();
    for d in lidar.directions() {
        let Some(hit) = cast_ray(scene, lidar.origin, d, lidar.max_range) else { continue };
        let n = match &noise {
            Some(dist) => loop {
                let v: f64 = dist.sample(&mut rng);
                if v.abs() <= 3.0 * lidar.noise_sigma {
                    break v;
                }
            },
            None => 0.0,
        };
        let p = add(lidar.origin, scale(d, hit.t + n));
        let intensity = classes::intensity(hit.class) + rng.random_range(-0.05f32..0.05);
        out.push([p[0] as f32, p[1] as f32, p[2] as f32, intensity]);
    }
    Ok(out)
}

/// Per-pixel semantic label ([`VOID`] on a miss) and ray distance
/// (`+inf` on a miss), sampled at pixel centres.
#[derive(Clone, Debug, PartialEq)]
pub struct Render {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
    pub depth: Vec<f64>,
}

pub fn render_camera(scene: &Scene, cam: &CameraSpec) -> Result<Render> {
    cam.validate()?;
    let n = cam.width * cam.height;
    let mut labels = vec![VOID; n];
    let mut depth = vec![f64::INFINITY; n];
    for v in 0..cam.height {
        for u in 0..cam.width {
            let d = cam.ray(u as f64 + 0.5, v as f64 + 0.5);
            if let Some(h) = cast_ray(scene, cam.origin(), d, f64::INFINITY) {
                labels[v * cam.width + u] = h.class;
                depth[v * cam.width + u] = h.t;
            }
        }
    }
    Ok(Render { width: cam.width, height: cam.height, labels, depth })
}

/// RGB image `[3, H, W]`: class albedo blended towards grey with distance,
/// plus pixel noise.
pub fn shade(render: &Render, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = render.width * render.height;
    let mut data = vec![0.0f32; 3 * n];
    for i in 0..n {
        let (col, fog) = match render.labels[i] {
            VOID => (classes::color(NUM_CLASSES as u8), 1.0),
            c => (classes::color(c), (-render.depth[i] / 30.0).exp() as f32),
        };
        for ch in 0..3 {
            let v = fog * col[ch] + (1.0 - fog) * 0.6 + rng.random_range(-0.03f32..0.03);
            data[ch * n + i] = v;
        }
    }
    Tensor::new(&[3, render.height, render.width], data).expect("sized")
}
