//! Naive `f64` implementations of the op set.
//!
//! These are direct transcriptions of each op's definition with no shared
//! code path with the optimized kernels. They serve as oracles: forward
//! values are compared against them and finite differences of them are
//! compared against the analytic gradients.

/// Direct nested-loop cross-correlation; `x[n,cin,h,w]`, `w[cout,cin,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    b: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, cin, h, wd] = xs;
    let [cout, _, kh, kw] = ws;
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((s * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Softmax over contiguous rows of length `c`.
pub fn softmax(x: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Mean over valid rows of `-w[y] log softmax(x)[y]`.
pub fn softmax_ce(x: &[f64], c: usize, labels: &[usize], valid: &[bool], weights: Option<&[f64]>) -> f64 {
    let p = softmax(x, c);
    let n = valid.iter().filter(|v| **v).count() as f64;
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if valid[i] {
            acc -= weights.map_or(1.0, |w| w[y]) * p[i * c + y].ln();
        }
    }
    acc / n
}

/// Axis permutation of a row-major array.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let total: usize = shape.iter().product();
    let mut out = vec![0.0; total];
    for (flat, o) in out.iter_mut().enumerate() {
        // decompose flat index in output shape
        let mut rem = flat;
        let mut src = 0;
        for ax in (0..rank).rev() {
            let i = rem % out_shape[ax];
            rem /= out_shape[ax];
            src += i * in_strides[perm[ax]];
        }
        *o = x[src];
    }
    out
}
