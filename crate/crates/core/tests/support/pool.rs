//! Frustum sampling and pooling oracles.

use occ_core::projection::{FrustumCoords, GridSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_frustum(rng: &mut ChaCha8Rng, n_pix: usize, bins: usize) -> FrustumCoords {
    let points = (0..n_pix * bins)
        .map(|_| [rng.random_range(-5.0f32..5.0), rng.random_range(-5.0f32..5.0), rng.random_range(-2.5f32..2.5)])
        .collect();
    FrustumCoords { points, cams: 1, rows: 1, cols: n_pix, bins }
}

pub fn oracle_cell(spec: &GridSpec, p: [f32; 3]) -> Option<u32> {
    let [w, l, h] = spec.dims().unwrap();
    let n = [w, l, h];
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let f = ((p[a] as f64 - spec.range[a] as f64) / spec.voxel as f64).floor();
        if f < 0.0 || f >= n[a] as f64 {
            return None;
        }
        idx[a] = f as usize;
    }
    Some((idx[0] * l + idx[1]) as u32)
}

/// Per-point scatter-add in `f64`.
pub fn naive_pool(spec: &GridSpec, f: &FrustumCoords, feats: &[f32], depth: &[f32], c: usize) -> Vec<f64> {
    let [w, l, _] = spec.dims().unwrap();
    let mut out = vec![0.0f64; c * w * l];
    for (p, pt) in f.points.iter().enumerate() {
        if let Some(cell) = oracle_cell(spec, *pt) {
            let pix = p / f.bins;
            for ch in 0..c {
                out[ch * w * l + cell as usize] += depth[p] as f64 * feats[pix * c + ch] as f64;
            }
        }
    }
    out
}

