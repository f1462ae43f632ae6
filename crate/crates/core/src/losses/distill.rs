use diffkit::{CustomOp, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::supervised::weighted_sum;
use crate::error::{Error, Result};
use crate::evalkit::RegionMasks;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BevKind {
    /// Squared L2 distance of the channel vectors.
    Mse,
    /// L1 distance of the channel vectors, reweighted per region.
    FgBgL1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccKind {
    /// One minus the cosine similarity of the channel vectors.
    Cosine,
    Mse,
    /// Soft cross-entropy between channel softmaxes.
    Ce,
    /// KL(teacher ‖ student) between channel softmaxes.
    Kl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub w_f: f32,
    pub w_b: f32,
    pub w_e: f32,
    pub w_bev: f32,
    pub w_occ: f32,
    pub bev_kind: BevKind,
    pub occ_kind: OccKind,
    /// One all-ones mask instead of the region split.
    pub full_space: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            w_f: 1.0,
            w_b: 1.0,
            w_e: 1.0,
            w_bev: 1.0,
            w_occ: 1.0,
            bev_kind: BevKind::Mse,
            occ_kind: OccKind::Cosine,
            full_space: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_f, self.w_b, self.w_e, self.w_bev, self.w_occ];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("distillation weights must be finite and non-negative, got {w:?}")));
        }
        Ok(())
    }
}

/// Per-position pair distances used by the region losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    SqL2,
    L1,
    Cosine,
    SoftCe,
    Kl,
}

impl From<BevKind> for PairKind {
    fn from(k: BevKind) -> Self {
        match k {
            BevKind::Mse => PairKind::SqL2,
            BevKind::FgBgL1 => PairKind::L1,
        }
    }
}

impl From<OccKind> for PairKind {
    fn from(k: OccKind) -> Self {
        match k {
            OccKind::Cosine => PairKind::Cosine,
            OccKind::Mse => PairKind::SqL2,
            OccKind::Ce => PairKind::SoftCe,
            OccKind::Kl => PairKind::Kl,
        }
    }
}

fn softmax64(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Distance between teacher vector `t` and student vector `s`, with its
/// gradients `(d/dt, d/ds)`.
fn pair(kind: PairKind, t: &[f64], s: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    match kind {
        PairKind::SqL2 => {
            let d: Vec<f64> = t.iter().zip(s).map(|(a, b)| a - b).collect();
            let v = d.iter().map(|x| x * x).sum();
            (v, d.iter().map(|x| 2.0 * x).collect(), d.iter().map(|x| -2.0 * x).collect())
        }
        PairKind::L1 => {
            let d: Vec<f64> = t.iter().zip(s).map(|(a, b)| a - b).collect();
            let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
            let v = d.iter().map(|x| x.abs()).sum();
            (v, d.iter().map(|&x| sign(x)).collect(), d.iter().map(|&x| -sign(x)).collect())
        }
        PairKind::Cosine => {
            let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            let ns = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nt == 0.0 || ns == 0.0 {
                return (0.0, vec![0.0; t.len()], vec![0.0; s.len()]);
            }
            let cos = t.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / (nt * ns);
            let gt = t.iter().zip(s).map(|(a, b)| -(b / (nt * ns) - cos * a / (nt * nt))).collect();
            let gs = t.iter().zip(s).map(|(a, b)| -(a / (nt * ns) - cos * b / (ns * ns))).collect();
            (1.0 - cos, gt, gs)
        }
        PairKind::SoftCe | PairKind::Kl => {
            let (pt, ps) = (softmax64(t), softmax64(s));
            let log_ps: Vec<f64> = ps.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect();
            // per-channel term whose p_t-weighted sum is the loss
            let term: Vec<f64> = if kind == PairKind::Kl {
                pt.iter().zip(&log_ps).map(|(p, lq)| p.max(f64::MIN_POSITIVE).ln() - lq).collect()
            } else {
                log_ps.iter().map(|lq| -lq).collect()
            };
            let v: f64 = pt.iter().zip(&term).map(|(p, x)| p * x).sum();
            let gt = pt.iter().zip(&term).map(|(p, x)| p * (x - v)).collect();
            let gs = pt.iter().zip(&ps).map(|(p, q)| q - p).collect();
            (v, gt, gs)
        }
    }
}

struct RegionDistill {
    gt: Vec<f32>,
    gs: Vec<f32>,
}

impl CustomOp for RegionDistill {
    fn name(&self) -> &'static str {
        "region_distill"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> diffkit::Result<Vec<Option<Tensor>>> {
        let k = grad.item();
        let scaled = |v: &[f32]| v.iter().map(|x| x * k).collect::<Vec<_>>();
        Ok(vec![
            needs[0].then(|| Tensor::new(inputs[0].shape(), scaled(&self.gt))).transpose()?,
            needs[1].then(|| Tensor::new(inputs[1].shape(), scaled(&self.gs))).transpose()?,
        ])
    }
}

/// Per-position weight `Σ_i S_i · w_i / |S_i|`; empty regions add nothing.
pub fn region_coefficients(masks: &RegionMasks, cfg: &DistillConfig) -> Vec<f64> {
    let counts = masks.counts();
    let regions = [(&masks.fg, cfg.w_f), (&masks.bg, cfg.w_b), (&masks.empty, cfg.w_e)];
    let mut coef = vec![0.0f64; masks.len()];
    for ((mask, w), n) in regions.into_iter().zip(counts) {
        if n == 0 {
            continue;
        }
        let k = w as f64 / n as f64;
        for (c, &m) in coef.iter_mut().zip(mask.iter()) {
            if m {
                *c += k;
            }
        }
    }
    coef
}

/// `Σ_p coef[p] · dist(Ft[:, p], Fs[:, p])` for channel-major `[C, ...]`
/// features.
pub fn region_distill(g: &mut Graph, ft: Var, fs: Var, coef: &[f64], kind: PairKind) -> Result<Var> {
    let (ts, ss) = (g.shape(ft).to_vec(), g.shape(fs).to_vec());
    if ts != ss || ts.is_empty() {
        return Err(Error::Dimension(format!("teacher features {:?} vs student {:?}", ts, ss)));
    }
    let c = ts[0];
    let n: usize = ts[1..].iter().product();
    if coef.len() != n {
        return Err(Error::Dimension(format!("{} mask positions for features {:?}", coef.len(), ts)));
    }
    let (t, s) = (g.value(ft).data(), g.value(fs).data());
    let mut gt = vec![0.0f32; c * n];
    let mut gs = vec![0.0f32; c * n];
    let mut loss = 0.0f64;
    let (mut tv, mut sv) = (vec![0.0f64; c], vec![0.0f64; c]);
    for p in (0..n).filter(|&p| coef[p] != 0.0) {
        for ch in 0..c {
            tv[ch] = t[ch * n + p] as f64;
            sv[ch] = s[ch * n + p] as f64;
        }
        let (v, dt, ds) = pair(kind, &tv, &sv);
        loss += coef[p] * v;
        for ch in 0..c {
            gt[ch * n + p] = (coef[p] * dt[ch]) as f32;
            gs[ch * n + p] = (coef[p] * ds[ch]) as f32;
        }
    }
    Ok(g.custom(&[ft, fs], Tensor::scalar(loss as f32), RegionDistill { gt, gs })?)
}

fn masks_for(masks: &RegionMasks, cfg: &DistillConfig) -> Vec<f64> {
    if cfg.full_space {
        region_coefficients(&RegionMasks::full_space(&masks.dims), cfg)
    } else {
        region_coefficients(masks, cfg)
    }
}

/// Region-normalised BEV feature distillation on `[C, W, L]` features.
pub fn distill_bev(g: &mut Graph, ft: Var, fs: Var, masks: &RegionMasks, cfg: &DistillConfig) -> Result<Var> {
    let s = g.shape(ft);
    if s.len() != 3 || masks.dims != s[1..] {
        return Err(Error::Dimension(format!("BEV features {:?} with masks over {:?}", s, masks.dims)));
    }
    let coef = masks_for(masks, cfg);
    region_distill(g, ft, fs, &coef, cfg.bev_kind.into())
}

/// Region-normalised 3D feature distillation on `[C, W, L, H]` features.
pub fn distill_occ(g: &mut Graph, ft: Var, fs: Var, masks: &RegionMasks, cfg: &DistillConfig) -> Result<Var> {
    let s = g.shape(ft);
    if s.len() != 4 || masks.dims != s[1..] {
        return Err(Error::Dimension(format!("3D features {:?} with masks over {:?}", s, masks.dims)));
    }
    let coef = masks_for(masks, cfg);
    region_distill(g, ft, fs, &coef, cfg.occ_kind.into())
}

/// `w_bev·l_bev + w_occ·l_occ`.
pub fn distill_total(l_bev: f64, l_occ: f64, cfg: &DistillConfig) -> f64 {
    cfg.w_bev as f64 * l_bev + cfg.w_occ as f64 * l_occ
}

/// Graph form of [`distill_total`].
pub fn distill_total_var(g: &mut Graph, l_bev: Var, l_occ: Var, cfg: &DistillConfig) -> Result<Var> {
    weighted_sum(g, &[(l_bev, cfg.w_bev), (l_occ, cfg.w_occ)])
}
