use std::sync::Arc;

use diffkit::{CustomOp, Exec, Graph, Tensor, Var};

use super::frustum::FrustumCoords;
use super::grid::GridSpec;
use crate::error::{Error, Result};
use crate::par::{for_each_chunk, for_each_chunk2};

/// Sentinel cell for frustum points outside the grid.
pub const NO_CELL: u32 = u32::MAX;

/// Frustum points grouped by target BEV cell.
///
/// `order[starts[i] .. starts[i] + lengths[i]]` lists the points of interval
/// `i`, all landing in `cells[i]`. Cells are strictly increasing across
/// intervals, so no two intervals write the same output.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalTable {
    pub order: Vec<u32>,
    pub starts: Vec<u32>,
    pub lengths: Vec<u32>,
    pub cells: Vec<u32>,
    /// Target cell of every frustum point, or [`NO_CELL`].
    pub point_cell: Vec<u32>,
    pub bins: usize,
    pub num_pixels: usize,
    /// `[W, L]`
    pub dims: [usize; 2],
}

impl IntervalTable {
    pub fn num_intervals(&self) -> usize {
        self.starts.len()
    }

    pub fn interval(&self, i: usize) -> &[u32] {
        let s = self.starts[i] as usize;
        &self.order[s..s + self.lengths[i] as usize]
    }
}

/// Sorts in-range frustum points by BEV cell and records each maximal run.
pub fn precompute_intervals(frustum: &FrustumCoords, spec: &GridSpec) -> Result<IntervalTable> {
    let g = spec.layout()?;
    let l = g.dims[1];
    let n = frustum.len();
    if n > u32::MAX as usize {
        return Err(Error::Config("frustum too large".into()));
    }
    let point_cell: Vec<u32> = frustum
        .points
        .iter()
        .map(|p| match g.voxel_of([p[0] as f64, p[1] as f64, p[2] as f64]) {
            Some(v) => (v[0] * l + v[1]) as u32,
            None => NO_CELL,
        })
        .collect();
    let mut order: Vec<u32> = (0..n as u32).filter(|&p| point_cell[p as usize] != NO_CELL).collect();
    order.sort_by_key(|&p| (point_cell[p as usize], p));
    let (mut starts, mut lengths, mut cells) = (Vec::new(), Vec::new(), Vec::new());
    for (k, &p) in order.iter().enumerate() {
        let c = point_cell[p as usize];
        if cells.last() != Some(&c) {
            starts.push(k as u32);
            lengths.push(0);
            cells.push(c);
        }
        *lengths.last_mut().expect("pushed") += 1;
    }
    Ok(IntervalTable {
        order,
        starts,
        lengths,
        cells,
        point_cell,
        bins: frustum.bins,
        num_pixels: frustum.num_pixels(),
        dims: [g.dims[0], g.dims[1]],
    })
}

fn check_inputs(t: &IntervalTable, feats: &[usize], depth: &[usize]) -> Result<usize> {
    if feats.len() != 2 || feats[0] != t.num_pixels {
        return Err(Error::Contract(format!(
            "bev_pool: features {:?} for a table over {} pixels",
            feats, t.num_pixels
        )));
    }
    if depth != [t.num_pixels, t.bins] {
        return Err(Error::Contract(format!(
            "bev_pool: depth weights {:?}, expected [{}, {}]",
            depth, t.num_pixels, t.bins
        )));
    }
    Ok(feats[1])
}

/// Segmented sum: `out[c, cell] = sum_{p in interval} depth[p] * feats[pix(p), c]`.
/// Returns `[C, W, L]` in row-major order.
pub fn bev_pool_forward(exec: Exec, t: &IntervalTable, feats: &[f32], depth: &[f32], c: usize) -> Vec<f32> {
    let d = t.bins;
    let per_interval = |i: usize, acc: &mut [f32]| {
        acc.fill(0.0);
        for &p in t.interval(i) {
            let p = p as usize;
            let w = depth[p];
            let row = &feats[(p / d) * c..(p / d + 1) * c];
            for (a, f) in acc.iter_mut().zip(row) {
                *a += w * f;
            }
        }
    };
    let mut vals = vec![0.0f32; t.num_intervals() * c];
    for_each_chunk(exec, &mut vals, c, per_interval);
    let cells = t.dims[0] * t.dims[1];
    let mut out = vec![0.0f32; c * cells];
    for (i, &cell) in t.cells.iter().enumerate() {
        for ch in 0..c {
            out[ch * cells + cell as usize] = vals[i * c + ch];
        }
    }
    out
}

/// Gradients of [`bev_pool_forward`] with respect to features and depth
/// weights, given the upstream `[C, W, L]` gradient.
pub fn bev_pool_backward(
    exec: Exec,
    t: &IntervalTable,
    feats: &[f32],
    depth: &[f32],
    c: usize,
    grad: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let d = t.bins;
    let cells = t.dims[0] * t.dims[1];
    // Cell-major copy of the upstream gradient so each lookup is contiguous.
    let mut gt = vec![0.0f32; cells * c];
    for ch in 0..c {
        for cell in 0..cells {
            gt[cell * c + ch] = grad[ch * cells + cell];
        }
    }
    let mut dfeat = vec![0.0f32; t.num_pixels * c];
    let mut ddepth = vec![0.0f32; t.num_pixels * d];
    let per_pixel = |pix: usize, df: &mut [f32], dd: &mut [f32]| {
        let row = &feats[pix * c..(pix + 1) * c];
        for b in 0..d {
            let p = pix * d + b;
            let cell = t.point_cell[p];
            if cell == NO_CELL {
                continue;
            }
            let gc = &gt[cell as usize * c..(cell as usize + 1) * c];
            let w = depth[p];
            let mut s = 0.0f32;
            for k in 0..c {
                s += row[k] * gc[k];
                df[k] += w * gc[k];
            }
            dd[b] = s;
        }
    };
    for_each_chunk2(exec, &mut dfeat, c, &mut ddepth, d, per_pixel);
    (dfeat, ddepth)
}

struct BevPool {
    table: Arc<IntervalTable>,
    exec: Exec,
}

impl CustomOp for BevPool {
    fn name(&self) -> &'static str {
        "bev_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> diffkit::Result<Vec<Option<Tensor>>> {
        let (f, d) = (inputs[0], inputs[1]);
        let c = f.shape()[1];
        let (df, dd) = bev_pool_backward(self.exec, &self.table, f.data(), d.data(), c, grad.data());
        Ok(vec![
            needs[0].then(|| Tensor::new(f.shape(), df)).transpose()?,
            needs[1].then(|| Tensor::new(d.shape(), dd)).transpose()?,
        ])
    }
}

/// Pools `feats[Npix, C]` weighted by `depth[Npix, D]` into `[C, W, L]`.
pub fn bev_pool(g: &mut Graph, feats: Var, depth: Var, table: &Arc<IntervalTable>) -> Result<Var> {
    let c = check_inputs(table, g.shape(feats), g.shape(depth))?;
    let exec = g.exec();
    let out = bev_pool_forward(exec, table, g.value(feats).data(), g.value(depth).data(), c);
    let value = Tensor::new(&[c, table.dims[0], table.dims[1]], out)?;
    Ok(g.custom(&[feats, depth], value, BevPool { table: Arc::clone(table), exec })?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frustum(points: Vec<[f32; 3]>) -> FrustumCoords {
        let n = points.len();
        FrustumCoords { points, cams: 1, rows: 1, cols: n, bins: 1 }
    }

    fn spec() -> GridSpec {
        GridSpec::new([0.0, 0.0, 0.0, 4.0, 4.0, 1.0], 1.0).unwrap()
    }

    #[test]
    fn single_bucket_and_singletons() {
        let t = precompute_intervals(&frustum(vec![[1.5, 2.5, 0.5]; 5]), &spec()).unwrap();
        assert_eq!((t.num_intervals(), t.lengths[0], t.cells[0]), (1, 5, 6));
        let pts = (0..4).map(|i| [i as f32 + 0.5, 0.5, 0.5]).collect();
        let t = precompute_intervals(&frustum(pts), &spec()).unwrap();
        assert_eq!(t.lengths, vec![1; 4]);
        assert_eq!(t.cells, vec![0, 4, 8, 12]);
    }

    #[test]
    fn out_of_range_points_are_excluded() {
        let t = precompute_intervals(&frustum(vec![[0.5, 0.5, 1.5], [-0.1, 0.5, 0.5], [0.5, 0.5, 0.5]]), &spec()).unwrap();
        assert_eq!(t.order, vec![2]);
        assert_eq!(t.point_cell[..2], [NO_CELL, NO_CELL]);
    }

    #[test]
    fn unit_weight_copies_and_zero_weight_annihilates() {
        let t = precompute_intervals(&frustum(vec![[2.5, 1.5, 0.5]]), &spec()).unwrap();
        let out = bev_pool_forward(Exec::Sequential, &t, &[3.0, -1.0], &[1.0], 2);
        assert_eq!(out[9], 3.0);
        assert_eq!(out[16 + 9], -1.0);
        assert_eq!(out.iter().filter(|v| **v != 0.0).count(), 2);
        let zero = bev_pool_forward(Exec::Sequential, &t, &[3.0, -1.0], &[0.0], 2);
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let t = Arc::new(precompute_intervals(&frustum(vec![[2.5, 1.5, 0.5]]), &spec()).unwrap());
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let d = g.constant(Tensor::zeros(&[1, 1])).unwrap();
        assert!(matches!(bev_pool(&mut g, f, d, &t), Err(Error::Contract(_))));
    }
}
