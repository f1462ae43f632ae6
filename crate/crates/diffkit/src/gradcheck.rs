//! Central finite differences and gradient comparison.
//!
//! The numeric side is evaluated on an `f64` function (usually one built from
//! [`crate::reference`]); single-precision forward passes are too coarse for
//! an elementwise relative tolerance of 1e-3 at step 1e-3.

use std::fmt;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::Result as OpResult;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default step for central differences.
pub const STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    /// Relative bound applied where `|analytic| > small`.
    pub rel: f64,
    /// Absolute bound applied elsewhere.
    pub abs: f64,
    pub small: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rel: 1e-3, abs: 1e-3, small: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "element {}: analytic {:e} vs numeric {:e} (error {:e})",
            self.index, self.analytic, self.numeric, self.error
        )
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Central differences at `h` and `h/2` combined to cancel the O(h²) term.
/// Small gradients of strongly curved functions need this to reach a 1e-3
/// relative match.
pub fn extrapolated_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let coarse = central_difference(&f, x, h);
    let fine = central_difference(&f, x, h / 2.0);
    coarse.iter().zip(&fine).map(|(c, f)| (4.0 * f - c) / 3.0).collect()
}

/// Elementwise error: relative where the analytic value is non-negligible.
pub fn element_error(analytic: f64, numeric: f64, tol: &Tolerance) -> (f64, bool) {
    let diff = (analytic - numeric).abs();
    if analytic.abs() > tol.small {
        let rel = diff / analytic.abs().max(numeric.abs());
        (rel, rel < tol.rel)
    } else {
        (diff, diff < tol.abs)
    }
}

/// Returns the worst offending element, if any.
pub fn compare(analytic: &[f32], numeric: &[f64], tol: &Tolerance) -> Result<f64, Mismatch> {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst: Option<Mismatch> = None;
    let mut max_err = 0.0f64;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let (err, ok) = element_error(a as f64, n, tol);
        max_err = max_err.max(err);
        if !ok && worst.as_ref().is_none_or(|w| err > w.error) {
            worst = Some(Mismatch { index: i, analytic: a as f64, numeric: n, error: err });
        }
    }
    match worst {
        Some(m) => Err(m),
        None => Ok(max_err),
    }
}

pub fn to_f64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Checks the gradient of every input of `build` against an `f64` reference.
///
/// Non-scalar outputs are reduced by a fixed random projection
/// `sum_i r_i y_i` (seeded by `proj_seed`) so every output element carries
/// weight. `reference` receives the inputs in `f64` and returns the flat
/// output. Returns the largest elementwise error seen.
pub fn check_graph(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> OpResult<Var>,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    proj_seed: u64,
    tol: &Tolerance,
) -> std::result::Result<f64, String> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone()))
        .collect::<OpResult<_>>()
        .map_err(|e| e.to_string())?;
    let y = build(&mut g, &vars).map_err(|e| e.to_string())?;
    let shape = g.shape(y).to_vec();
    let mut rng = StdRng::seed_from_u64(proj_seed);
    let proj: Vec<f32> = (0..g.value(y).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r = g.constant(Tensor::new(&shape, proj.clone()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let loss = g.mul(y, r).and_then(|p| g.sum(p)).map_err(|e| e.to_string())?;
    let grads = g.backward(loss).map_err(|e| e.to_string())?;

    let flat: Vec<f64> = inputs.iter().flat_map(|t| to_f64(t.data())).collect();
    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let proj64 = to_f64(&proj);
    let f = |x: &[f64]| {
        let mut parts = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for &n in &sizes {
            parts.push(x[off..off + n].to_vec());
            off += n;
        }
        let out = reference(&parts);
        assert_eq!(out.len(), proj64.len(), "reference output length");
        out.iter().zip(&proj64).map(|(a, b)| a * b).sum()
    };
    let numeric = extrapolated_difference(f, &flat, STEP);
    let mut worst = 0.0f64;
    let mut off = 0;
    for (i, v) in vars.iter().enumerate() {
        let a = grads.get(*v);
        let n = &numeric[off..off + sizes[i]];
        off += sizes[i];
        match compare(a.data(), n, tol) {
            Ok(e) => worst = worst.max(e),
            Err(m) => return Err(format!("input {i}: {m}")),
        }
    }
    Ok(worst)
}
