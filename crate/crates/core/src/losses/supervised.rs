use diffkit::{CustomOp, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the ratios inside the affinity logs.
const RATIO_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_ce: f32,
    pub w_ls: f32,
    pub w_geo: f32,
    pub w_sem: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_ce: 1.0, w_ls: 1.0, w_geo: 1.0, w_sem: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_ce, self.w_ls, self.w_geo, self.w_sem];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {w:?}")));
        }
        Ok(())
    }
}

/// `w_ce·ce + w_ls·ls + w_geo·geo + w_sem·sem` for parts `[ce, ls, geo, sem]`.
pub fn total_supervised(parts: [f64; 4], w: &LossWeights) -> f64 {
    w.w_ce as f64 * parts[0] + w.w_ls as f64 * parts[1] + w.w_geo as f64 * parts[2] + w.w_sem as f64 * parts[3]
}

/// `Σ w_i · term_i` on the graph; zero-weight terms are dropped.
pub fn weighted_sum(g: &mut Graph, terms: &[(Var, f32)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms.iter().filter(|(_, w)| *w != 0.0) {
        let t = if w == 1.0 { v } else { g.scale(v, w)? };
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(g.constant(Tensor::scalar(0.0))?),
    }
}

fn check_rows(g: &Graph, x: Var, labels: &[usize], valid: &[bool], what: &str) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 2 {
        return Err(Error::Dimension(format!("{what} expects [M,C], got {:?}", s)));
    }
    let (m, c) = (s[0], s[1]);
    if labels.len() != m || valid.len() != m {
        return Err(Error::Dimension(format!("{what}: {m} rows, {} labels, {} valid flags", labels.len(), valid.len())));
    }
    if let Some(i) = (0..m).find(|&i| valid[i] && labels[i] >= c) {
        return Err(Error::Config(format!("{what}: label {} out of range at row {i}", labels[i])));
    }
    Ok((m, c))
}

/// Mean cross-entropy over valid rows of `logits[M, C]`, optionally with
/// per-class weights on each row's term.
pub fn cross_entropy(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    valid: &[bool],
    class_weights: Option<&[f32]>,
) -> Result<Var> {
    check_rows(g, logits, labels, valid, "cross_entropy")?;
    Ok(g.softmax_ce(logits, labels, valid, class_weights)?)
}

/// Lovász gradient of the Jaccard loss for foreground flags sorted by
/// decreasing error.
fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|f| **f).count() as f64;
    let mut out = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in fg_sorted {
        if f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jac = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

struct Lovasz {
    /// d loss / d probs, precomputed in the forward pass.
    grad: Vec<f32>,
}

impl CustomOp for Lovasz {
    fn name(&self) -> &'static str {
        "lovasz_softmax"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> diffkit::Result<Vec<Option<Tensor>>> {
        let s = grad.item();
        Ok(vec![needs[0]
            .then(|| Tensor::new(inputs[0].shape(), self.grad.iter().map(|v| v * s).collect()))
            .transpose()?])
    }
}

/// Lovász-softmax over valid rows of `probs[M, C]`, averaged over the classes
/// present among the valid labels. Errors are `|[y = c] - p(c)|`.
pub fn lovasz_softmax(g: &mut Graph, probs: Var, labels: &[usize], valid: &[bool]) -> Result<Var> {
    let (m, c) = check_rows(g, probs, labels, valid, "lovasz_softmax")?;
    let rows: Vec<usize> = (0..m).filter(|&i| valid[i]).collect();
    if rows.is_empty() {
        return Err(Error::Degenerate("lovasz_softmax: no valid entries".into()));
    }
    let p = g.value(probs).data();
    let mut present: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    present.sort_unstable();
    present.dedup();
    let k = present.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; m * c];
    for &cls in &present {
        let mut errs: Vec<(f64, usize, bool)> = rows
            .iter()
            .map(|&i| {
                let fg = labels[i] == cls;
                ((fg as u8 as f64 - p[i * c + cls] as f64).abs(), i, fg)
            })
            .collect();
        errs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let fg: Vec<bool> = errs.iter().map(|e| e.2).collect();
        for ((e, i, f), w) in errs.into_iter().zip(lovasz_grad(&fg)) {
            loss += e * w / k;
            let de_dp = if f { -1.0 } else { 1.0 };
            grad[i * c + cls] = (w * de_dp / k) as f32;
        }
    }
    Ok(g.custom(&[probs], Tensor::scalar(loss as f32), Lovasz { grad })?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalMode {
    /// Occupied vs empty, with `p(occupied) = 1 - p(empty)`.
    Geo { empty: usize },
    /// Every class column.
    Sem,
}

struct Affinity {
    grad: Vec<f32>,
}

impl CustomOp for Affinity {
    fn name(&self) -> &'static str {
        "affinity_scal"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> diffkit::Result<Vec<Option<Tensor>>> {
        let s = grad.item();
        Ok(vec![needs[0]
            .then(|| Tensor::new(inputs[0].shape(), self.grad.iter().map(|v| v * s).collect()))
            .transpose()?])
    }
}

/// Precision/recall/specificity terms of one binary problem: value and
/// d/dq for each row, where `q` is the class probability and `pos` the label.
fn scal_terms(q: &[f64], pos: &[bool]) -> Option<(f64, Vec<f64>)> {
    let n_pos = pos.iter().filter(|v| **v).count() as f64;
    let n_neg = pos.len() as f64 - n_pos;
    let sum_q: f64 = q.iter().sum();
    if n_pos == 0.0 || n_neg == 0.0 || sum_q <= 0.0 {
        return None;
    }
    let a: f64 = q.iter().zip(pos).filter(|(_, p)| **p).map(|(v, _)| v).sum();
    let s: f64 = q.iter().zip(pos).filter(|(_, p)| !**p).map(|(v, _)| 1.0 - v).sum();
    let (prec, rec, spec) = (a / sum_q, a / n_pos, s / n_neg);
    let value = -(prec.max(RATIO_FLOOR).ln() + rec.max(RATIO_FLOOR).ln() + spec.max(RATIO_FLOOR).ln());
    let grad = q
        .iter()
        .zip(pos)
        .map(|(_, &p)| {
            let mut d = 0.0;
            if prec > RATIO_FLOOR {
                d += if p { 1.0 / a } else { 0.0 } - 1.0 / sum_q;
            }
            if rec > RATIO_FLOOR && p {
                d += 1.0 / a;
            }
            if spec > RATIO_FLOOR && !p {
                d -= 1.0 / s;
            }
            -d
        })
        .collect();
    Some((value, grad))
}

/// Scene-class affinity loss over valid rows of `probs[M, C]`:
/// `-mean_c(log P_c + log R_c + log S_c)` over classes with non-degenerate
/// denominators.
pub fn affinity_scal(g: &mut Graph, probs: Var, labels: &[usize], valid: &[bool], mode: ScalMode) -> Result<Var> {
    let (m, c) = check_rows(g, probs, labels, valid, "affinity_scal")?;
    let rows: Vec<usize> = (0..m).filter(|&i| valid[i]).collect();
    let p = g.value(probs).data();
    let mut grad = vec![0.0f32; m * c];
    let mut terms = Vec::new();
    match mode {
        ScalMode::Geo { empty } => {
            if empty >= c {
                return Err(Error::Config(format!("empty column {empty} out of range for {c} classes")));
            }
            let q: Vec<f64> = rows.iter().map(|&i| 1.0 - p[i * c + empty] as f64).collect();
            let pos: Vec<bool> = rows.iter().map(|&i| labels[i] != empty).collect();
            if let Some((v, d)) = scal_terms(&q, &pos) {
                // dq/dp(empty) = -1
                terms.push((v, rows.iter().zip(d).map(|(&i, d)| (i * c + empty, -d)).collect::<Vec<_>>()));
            }
        }
        ScalMode::Sem => {
            for cls in 0..c {
                let q: Vec<f64> = rows.iter().map(|&i| p[i * c + cls] as f64).collect();
                let pos: Vec<bool> = rows.iter().map(|&i| labels[i] == cls).collect();
                if let Some((v, d)) = scal_terms(&q, &pos) {
                    terms.push((v, rows.iter().zip(d).map(|(&i, d)| (i * c + cls, d)).collect()));
                }
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::Degenerate("affinity_scal: every class has a degenerate denominator".into()));
    }
    let k = terms.len() as f64;
    let mut loss = 0.0;
    for (v, d) in terms {
        loss += v / k;
        for (at, dv) in d {
            grad[at] += (dv / k) as f32;
        }
    }
    Ok(g.custom(&[probs], Tensor::scalar(loss as f32), Affinity { grad })?)
}

/// Rows kept by hard example mining: valid rows whose true-class probability
/// is below `score_thresh`, or the `min_kept` lowest-probability valid rows
/// when fewer qualify.
pub fn ohem_keep(logits: &Tensor, labels: &[usize], valid: &[bool], min_kept: usize, score_thresh: f32) -> Vec<bool> {
    let c = logits.shape()[1];
    let mut probs: Vec<(f32, usize)> = Vec::new();
    let mut row = vec![0.0f32; c];
    for (i, x) in logits.data().chunks(c).enumerate() {
        if valid[i] {
            row.copy_from_slice(x);
            diffkit::softmax_row(&mut row);
            probs.push((row[labels[i]], i));
        }
    }
    let mut keep = vec![false; valid.len()];
    let below = probs.iter().filter(|(p, _)| *p < score_thresh).count();
    if below >= min_kept {
        for &(p, i) in &probs {
            keep[i] = p < score_thresh;
        }
    } else {
        probs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in probs.iter().take(min_kept) {
            keep[i] = true;
        }
    }
    keep
}

/// Cross-entropy averaged over the rows selected by [`ohem_keep`]; the kept
/// set is fixed during the backward pass.
pub fn ohem_ce(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    valid: &[bool],
    min_kept: usize,
    score_thresh: f32,
) -> Result<Var> {
    check_rows(g, logits, labels, valid, "ohem_ce")?;
    if min_kept == 0 {
        return Err(Error::Config("ohem_ce: min_kept must be at least 1".into()));
    }
    if !valid.iter().any(|v| *v) {
        return Err(Error::Degenerate("ohem_ce: no valid entries".into()));
    }
    let keep = ohem_keep(g.value(logits), labels, valid, min_kept, score_thresh);
    cross_entropy(g, logits, labels, &keep, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OhemConfig {
    pub min_kept: usize,
    pub score_thresh: f32,
}

/// Which supervised terms are active and how they are weighted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub weights: LossWeights,
    /// All four terms; otherwise cross-entropy only.
    pub all_losses: bool,
    /// Replaces plain cross-entropy with hard example mining.
    pub ohem: Option<OhemConfig>,
    /// Per-class factors on the cross-entropy terms.
    pub class_weights: Option<Vec<f32>>,
    pub empty_class: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            all_losses: false,
            ohem: None,
            class_weights: None,
            empty_class: crate::classes::EMPTY as usize,
        }
    }
}

/// The supervised objective on `logits[M, C]` and the unweighted values of
/// `[ce, ls, geo, sem]` (zero for inactive terms). Affinity terms whose
/// classes are all degenerate are dropped for this sample.
pub fn supervised_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    valid: &[bool],
    cfg: &SupervisedConfig,
) -> Result<(Var, [f64; 4])> {
    cfg.weights.validate()?;
    let w = cfg.weights;
    let ce = match cfg.ohem {
        Some(o) => ohem_ce(g, logits, labels, valid, o.min_kept, o.score_thresh)?,
        None => cross_entropy(g, logits, labels, valid, cfg.class_weights.as_deref())?,
    };
    let mut parts = [g.value(ce).item() as f64, 0.0, 0.0, 0.0];
    let mut terms = vec![(ce, w.w_ce)];
    if cfg.all_losses {
        let probs = g.softmax(logits)?;
        let ls = lovasz_softmax(g, probs, labels, valid)?;
        parts[1] = g.value(ls).item() as f64;
        terms.push((ls, w.w_ls));
        for (slot, mode, wt) in [(2, ScalMode::Geo { empty: cfg.empty_class }, w.w_geo), (3, ScalMode::Sem, w.w_sem)] {
            match affinity_scal(g, probs, labels, valid, mode) {
                Ok(v) => {
                    parts[slot] = g.value(v).item() as f64;
                    terms.push((v, wt));
                }
                Err(Error::Degenerate(_)) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok((weighted_sum(g, &terms)?, parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: Vec<f32>) -> Var {
        g.leaf(Tensor::new(shape, data).unwrap()).unwrap()
    }

    #[test]
    fn composition_hand_values() {
        assert_eq!(total_supervised([1.0, 2.0, 3.0, 4.0], &LossWeights::default()), 10.0);
        let zero = LossWeights { w_ce: 0.0, w_ls: 0.0, w_geo: 0.0, w_sem: 0.0 };
        assert_eq!(total_supervised([1.0, 2.0, 3.0, 4.0], &zero), 0.0);
    }

    #[test]
    fn lovasz_single_pixel() {
        let mut g = Graph::new();
        let p = leaf(&mut g, &[1, 2], vec![0.3, 0.7]);
        let l = lovasz_softmax(&mut g, p, &[1], &[true]).unwrap();
        assert!((g.value(l).item() - 0.3).abs() < 1e-7);
        let p = leaf(&mut g, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let l = lovasz_softmax(&mut g, p, &[0, 1], &[true; 2]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert!(lovasz_softmax(&mut g, p, &[0, 1], &[false; 2]).is_err());
    }

    #[test]
    fn affinity_perfect_and_absent() {
        let mut g = Graph::new();
        let p = leaf(&mut g, &[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let l = affinity_scal(&mut g, p, &[0, 1, 0], &[true; 3], ScalMode::Sem).unwrap();
        assert!(g.value(l).item().abs() < 1e-7);
        let l = affinity_scal(&mut g, p, &[0, 1, 2], &[true; 3], ScalMode::Geo { empty: 2 }).unwrap();
        assert!(g.value(l).item().is_finite());
        assert!(affinity_scal(&mut g, p, &[2, 2, 2], &[true; 3], ScalMode::Geo { empty: 2 }).is_err());
    }

    #[test]
    fn ohem_threshold_and_fallback() {
        let logits = Tensor::new(&[3, 2], vec![5.0, 0.0, 0.0, 5.0, 0.0, 0.0]).unwrap();
        let keep = ohem_keep(&logits, &[0, 0, 1], &[true; 3], 1, 0.6);
        assert_eq!(keep, vec![false, true, true]);
        let keep = ohem_keep(&logits, &[0, 0, 1], &[true; 3], 1, 0.0);
        assert_eq!(keep, vec![false, true, false]);
    }

    #[test]
    fn weighted_sum_of_nothing_is_zero() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[], vec![3.0]);
        let s = weighted_sum(&mut g, &[(a, 0.0)]).unwrap();
        assert_eq!(g.value(s).item(), 0.0);
    }
}
