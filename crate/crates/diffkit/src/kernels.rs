//! Dense compute kernels: GEMM dispatch and im2col convolution.
//!
//! Every kernel has a sequential path and, with the `parallel` feature, a
//! rayon path that partitions the *output* into disjoint blocks. Each output
//! element is produced by the same instruction sequence on either path, so
//! results are bit-identical between the two.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for a kernel call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

// Below this many multiply-adds a GEMM is not worth splitting.
#[cfg(feature = "parallel")]
const PAR_GEMM_MIN_WORK: usize = 1 << 18;

/// `c[m,n] (+)= op(a) · op(b)` with `c` contiguous row-major.
///
/// `a` is stored `[m,k]` (or `[k,m]` when `a_t`), `b` is stored `[k,n]`
/// (or `[n,k]` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    exec: Exec,
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };

    let run = |rows: usize, a_block: &[f32], c_block: &mut [f32]| {
        // SAFETY: the block views stay inside `a`, `b` and `c`: `a_block`
        // starts at row `i0` and is addressed with the parent strides for
        // `rows` rows, `c_block` is exactly `rows * n` contiguous values.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                k,
                n,
                1.0,
                a_block.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };

    match exec {
        Exec::Sequential => run(m, a, c),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            let threads = rayon::current_num_threads();
            if threads <= 1 || m * k * n < PAR_GEMM_MIN_WORK || m < 2 {
                run(m, a, c);
                return;
            }
            let block = m.div_ceil(threads).max(1);
            c.par_chunks_mut(block * n).enumerate().for_each(|(bi, c_block)| {
                let i0 = bi * block;
                let rows = c_block.len() / n;
                run(rows, &a[i0 * rsa..], c_block);
            });
        }
    }
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the input already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col_row(g: &ConvGeom, x: &[f32], row: usize, out: &mut [f32]) {
    let kx = row % g.kw;
    let ky = (row / g.kw) % g.kh;
    let ci = row / (g.kw * g.kh);
    let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
    for oy in 0..g.oh {
        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
        let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
        if iy < 0 || iy >= g.h as isize {
            dst.fill(0.0);
            continue;
        }
        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
        for (ox, d) in dst.iter_mut().enumerate() {
            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
            *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
        }
    }
}

/// Unfold one sample `x[cin,h,w]` into `cols[cin*kh*kw, oh*ow]`.
pub fn im2col(exec: Exec, g: &ConvGeom, x: &[f32], cols: &mut [f32]) {
    let p = g.out_pixels();
    match exec {
        Exec::Sequential => {
            for (row, out) in cols.chunks_mut(p).enumerate() {
                im2col_row(g, x, row, out);
            }
        }
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            cols.par_chunks_mut(p)
                .enumerate()
                .for_each(|(row, out)| im2col_row(g, x, row, out));
        }
    }
}

fn col2im_channel(g: &ConvGeom, cols: &[f32], ci: usize, dx: &mut [f32]) {
    let p = g.out_pixels();
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let row = (ci * g.kh + ky) * g.kw + kx;
            let src = &cols[row * p..(row + 1) * p];
            for oy in 0..g.oh {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let iy = iy as usize;
                for ox in 0..g.ow {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix >= 0 && (ix as usize) < g.w {
                        dx[iy * g.w + ix as usize] += src[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

/// Fold `cols` back onto `dx[cin,h,w]`, accumulating overlapping taps.
pub fn col2im(exec: Exec, g: &ConvGeom, cols: &[f32], dx: &mut [f32]) {
    let plane = g.h * g.w;
    match exec {
        Exec::Sequential => {
            for (ci, d) in dx.chunks_mut(plane).enumerate() {
                col2im_channel(g, cols, ci, d);
            }
        }
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            dx.par_chunks_mut(plane)
                .enumerate()
                .for_each(|(ci, d)| col2im_channel(g, cols, ci, d));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm(Exec::Sequential, m, k, n, &a, false, &b, false, &mut c, false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }
        // Transposed storage of both operands.
        let at: Vec<f32> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f32> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        gemm(Exec::default(), m, k, n, &at, true, &bt, true, &mut c, false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_gemm_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, k, n) = (96, 80, 120);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        gemm(Exec::Sequential, m, k, n, &a, false, &b, false, &mut c1, false);
        gemm(Exec::Parallel, m, k, n, &a, false, &b, false, &mut c2, false);
        assert_eq!(c1, c2);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom { cin: 2, h: 5, w: 4, kh: 3, kw: 3, stride: 2, padding: 1, oh: 3, ow: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f32> = (0..2 * 5 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..g.patch_len() * g.out_pixels()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(Exec::default(), &g, &x, &mut cols);
        let mut dx = vec![0.0; x.len()];
        col2im(Exec::default(), &g, &y, &mut dx);
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
