use diffkit::{Graph, Tensor, Var};

use super::grid::GridSpec;
use crate::error::{Error, Result};

/// Per-pillar features: mean `x, y, z, intensity` and the mean offsets
/// `x - cx, y - cy, z - cz` from the pillar centre (`cz` is the mid-height of
/// the range).
pub const PILLAR_FEATURES: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct Pillars {
    /// `[P, PILLAR_FEATURES]`
    pub features: Tensor,
    /// `(x, y)` cell per pillar, sorted by flattened cell index.
    pub coords: Vec<[usize; 2]>,
}

/// Buckets in-range points by `(x, y)` cell and averages their features.
/// Sums run in `f64` in input order.
pub fn pillarize(points: &[[f32; 4]], spec: &GridSpec) -> Result<Pillars> {
    let g = spec.layout()?;
    let [w, l, _] = g.dims;
    let cz = (g.min[2] + spec.range[5] as f64) / 2.0;
    let mut slot = vec![u32::MAX; w * l];
    let mut sums: Vec<[f64; PILLAR_FEATURES]> = Vec::new();
    let mut counts: Vec<u32> = Vec::new();
    let mut cells: Vec<usize> = Vec::new();
    for p in points {
        let pos = [p[0] as f64, p[1] as f64, p[2] as f64];
        let Some(idx) = g.voxel_of(pos) else { continue };
        let cell = idx[0] * l + idx[1];
        if slot[cell] == u32::MAX {
            slot[cell] = sums.len() as u32;
            sums.push([0.0; PILLAR_FEATURES]);
            counts.push(0);
            cells.push(cell);
        }
        let k = slot[cell] as usize;
        let c = g.center(idx);
        let f = [pos[0], pos[1], pos[2], p[3] as f64, pos[0] - c[0], pos[1] - c[1], pos[2] - cz];
        for (s, v) in sums[k].iter_mut().zip(f) {
            *s += v;
        }
        counts[k] += 1;
    }
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_unstable_by_key(|&k| cells[k]);
    let mut data = Vec::with_capacity(order.len() * PILLAR_FEATURES);
    let mut coords = Vec::with_capacity(order.len());
    for k in order {
        let n = counts[k] as f64;
        data.extend(sums[k].iter().map(|s| (s / n) as f32));
        coords.push([cells[k] / l, cells[k] % l]);
    }
    let features = Tensor::new(&[coords.len(), PILLAR_FEATURES], data)?;
    Ok(Pillars { features, coords })
}

/// Writes each pillar's feature vector into a dense `[F, W, L]` map.
///
/// Coordinates must be unique and in range.
pub fn scatter_bev(g: &mut Graph, features: Var, coords: &[[usize; 2]], dims: [usize; 2]) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 2 || shape[0] != coords.len() {
        return Err(Error::Dimension(format!(
            "scatter_bev: features {:?} for {} coordinates",
            shape,
            coords.len()
        )));
    }
    let (p, f) = (shape[0], shape[1]);
    let [w, l] = dims;
    let cells = w * l;
    let mut seen = vec![false; cells];
    for c in coords {
        if c[0] >= w || c[1] >= l {
            return Err(Error::Contract(format!("pillar coordinate {:?} outside {:?}", c, dims)));
        }
        let k = c[0] * l + c[1];
        if std::mem::replace(&mut seen[k], true) {
            return Err(Error::Contract(format!("duplicate pillar coordinate {:?}", c)));
        }
    }
    // [P, F] -> [F, P], then element (f, p) lands at f * W * L + cell(p).
    let t = g.permute(features, &[1, 0])?;
    let mut idx = Vec::with_capacity(p * f);
    for ch in 0..f {
        for c in coords {
            idx.push(ch * cells + c[0] * l + c[1]);
        }
    }
    Ok(g.scatter_add(t, idx, &[f, w, l])?)
}
