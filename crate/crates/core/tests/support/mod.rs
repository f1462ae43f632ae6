//! Oracles and gradient checks shared by the loss tests and the acceptance
//! suite.
#![allow(dead_code)]

pub mod nets;
pub mod pool;

use diffkit::gradcheck::{check_graph, Tolerance};
use diffkit::{reference, Tensor};
use occ_core::evalkit::{Region, RegionMasks};
use occ_core::losses::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn contract(e: occ_core::Error) -> diffkit::Error {
    diffkit::Error::Contract(e.to_string())
}

pub fn random_logits(rng: &mut ChaCha8Rng, m: usize, c: usize) -> Tensor {
    Tensor::new(&[m, c], (0..m * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, m: usize, c: usize) -> (Vec<usize>, Vec<bool>) {
    let labels = (0..m).map(|_| rng.random_range(0..c)).collect();
    let mut valid: Vec<bool> = (0..m).map(|_| rng.random_bool(0.8)).collect();
    valid[0] = true;
    (labels, valid)
}

// Lovász extension of the Jaccard loss, written from the set function
// `Δ(M) = |M| / |F ∪ M|` over sorted error prefixes.
pub fn lovasz_oracle(p: &[f64], c: usize, labels: &[usize], valid: &[bool]) -> f64 {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| valid[i]).collect();
    let mut present: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    present.sort();
    present.dedup();
    let mut total = 0.0;
    for &cls in &present {
        let fg: Vec<usize> = rows.iter().copied().filter(|&i| labels[i] == cls).collect();
        let err = |i: usize| ((labels[i] == cls) as u8 as f64 - p[i * c + cls]).abs();
        let mut order = rows.clone();
        order.sort_by(|&a, &b| err(b).partial_cmp(&err(a)).unwrap());
        let delta = |set: &[usize]| {
            if set.is_empty() {
                return 0.0;
            }
            let union = fg.len() + set.iter().filter(|i| !fg.contains(i)).count();
            set.len() as f64 / union as f64
        };
        for k in 0..order.len() {
            total += err(order[k]) * (delta(&order[..k + 1]) - delta(&order[..k]));
        }
    }
    total / present.len() as f64
}

pub fn scal_oracle(q: &[f64], pos: &[bool]) -> Option<f64> {
    let n_pos = pos.iter().filter(|p| **p).count() as f64;
    let n_neg = pos.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return None;
    }
    let tp: f64 = q.iter().zip(pos).filter(|(_, p)| **p).map(|(v, _)| v).sum();
    let tn: f64 = q.iter().zip(pos).filter(|(_, p)| !**p).map(|(v, _)| 1.0 - v).sum();
    let precision = tp / q.iter().sum::<f64>();
    Some(-(precision.ln() + (tp / n_pos).ln() + (tn / n_neg).ln()))
}

pub fn affinity_oracle(p: &[f64], c: usize, labels: &[usize], valid: &[bool], geo: Option<usize>) -> f64 {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| valid[i]).collect();
    let terms: Vec<f64> = match geo {
        Some(empty) => {
            let q: Vec<f64> = rows.iter().map(|&i| 1.0 - p[i * c + empty]).collect();
            let pos: Vec<bool> = rows.iter().map(|&i| labels[i] != empty).collect();
            scal_oracle(&q, &pos).into_iter().collect()
        }
        None => (0..c)
            .filter_map(|k| {
                let q: Vec<f64> = rows.iter().map(|&i| p[i * c + k]).collect();
                let pos: Vec<bool> = rows.iter().map(|&i| labels[i] == k).collect();
                scal_oracle(&q, &pos)
            })
            .collect(),
    };
    terms.iter().sum::<f64>() / terms.len() as f64
}

pub fn random_masks(rng: &mut ChaCha8Rng, dims: &[usize]) -> RegionMasks {
    let n: usize = dims.iter().product();
    let regions: Vec<Region> = (0..n)
        .map(|_| match rng.random_range(0..3) {
            0 => Region::Foreground,
            1 => Region::Background,
            _ => Region::Empty,
        })
        .collect();
    RegionMasks::from_regions(dims, regions.into_iter())
}

pub fn pair_oracle(kind: PairKind, t: &[f64], s: &[f64]) -> f64 {
    match kind {
        PairKind::SqL2 => t.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum(),
        PairKind::L1 => t.iter().zip(s).map(|(a, b)| (a - b).abs()).sum(),
        PairKind::Cosine => {
            let dot: f64 = t.iter().zip(s).map(|(a, b)| a * b).sum();
            let nt = t.iter().map(|a| a * a).sum::<f64>().sqrt();
            let ns = s.iter().map(|a| a * a).sum::<f64>().sqrt();
            1.0 - dot / (nt * ns)
        }
        PairKind::SoftCe => {
            let (pt, ps) = (reference::softmax(t, t.len()), reference::softmax(s, s.len()));
            -pt.iter().zip(&ps).map(|(a, b)| a * b.ln()).sum::<f64>()
        }
        PairKind::Kl => {
            let (pt, ps) = (reference::softmax(t, t.len()), reference::softmax(s, s.len()));
            pt.iter().zip(&ps).map(|(a, b)| a * (a / b).ln()).sum()
        }
    }
}

/// Region-normalised distance, looping over regions and their members.
pub fn distill_oracle(t: &[f64], s: &[f64], c: usize, masks: &RegionMasks, cfg: &DistillConfig, kind: PairKind) -> f64 {
    let n = masks.len();
    let regions = [(&masks.fg, cfg.w_f), (&masks.bg, cfg.w_b), (&masks.empty, cfg.w_e)];
    let mut total = 0.0;
    for (mask, w) in regions {
        let members: Vec<usize> = (0..n).filter(|&p| mask[p]).collect();
        if members.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for &p in &members {
            let tv: Vec<f64> = (0..c).map(|k| t[k * n + p]).collect();
            let sv: Vec<f64> = (0..c).map(|k| s[k * n + p]).collect();
            acc += pair_oracle(kind, &tv, &sv);
        }
        total += w as f64 * acc / members.len() as f64;
    }
    total
}

/// Teacher and student features whose per-element gap stays clear of zero.
pub fn feature_pair(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Tensor, Tensor) {
    let n: usize = shape.iter().product();
    let t: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s: Vec<f32> = t
        .iter()
        .map(|v| {
            let gap = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) { v + gap } else { v - gap }
        })
        .collect();
    (Tensor::new(shape, t).unwrap(), Tensor::new(shape, s).unwrap())
}

pub fn weighted_cfg(rng: &mut ChaCha8Rng) -> DistillConfig {
    DistillConfig {
        w_f: rng.random_range(0.5..2.0),
        w_b: rng.random_range(0.5..2.0),
        w_e: rng.random_range(0.1..1.0),
        ..Default::default()
    }
}


/// Weighted and unweighted cross-entropy against the reference.
pub fn ce_gradcheck(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, c) = (12, 6);
    let x = random_logits(&mut rng, m, c);
    let (labels, valid) = random_labels(&mut rng, m, c);
    let w: Vec<f32> = (0..c).map(|_| rng.random_range(0.5..4.0)).collect();
    let w64: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let mut worst = 0.0f64;
    for weights in [None, Some(&w)] {
        worst = worst.max(check_graph(
            &[x.clone()],
            |g, v| cross_entropy(g, v[0], &labels, &valid, weights.map(|w| w.as_slice())).map_err(contract),
            |x| vec![reference::softmax_ce(&x[0], c, &labels, &valid, weights.map(|_| w64.as_slice()))],
            seed,
            &Tolerance::default(),
        )?);
    }
    Ok(worst)
}

/// Lovász-softmax behind a softmax, against the set-function oracle.
pub fn lovasz_gradcheck(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let (m, c) = (8, 3);
    let x = random_logits(&mut rng, m, c);
    let (labels, valid) = random_labels(&mut rng, m, c);
    check_graph(
        &[x],
        |g, v| {
            let p = g.softmax(v[0])?;
            lovasz_softmax(g, p, &labels, &valid).map_err(contract)
        },
        |x| vec![lovasz_oracle(&reference::softmax(&x[0], c), c, &labels, &valid)],
        seed,
        &Tolerance::default(),
    )
}

/// Geometric and semantic affinity behind a softmax.
pub fn affinity_gradcheck(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let (m, c) = (16, 4);
    let x = random_logits(&mut rng, m, c);
    let (labels, mut valid) = random_labels(&mut rng, m, c);
    // one occupied and one empty valid row keep the geometric term defined
    let (occ, empty) = ((0..m).find(|&i| labels[i] != 3), (0..m).find(|&i| labels[i] == 3));
    let (Some(o), Some(e)) = (occ, empty) else {
        return Err(format!("seed {seed} draws a single class"));
    };
    valid[o] = true;
    valid[e] = true;
    let mut worst = 0.0f64;
    for (mode, geo) in [(ScalMode::Geo { empty: 3 }, Some(3)), (ScalMode::Sem, None)] {
        worst = worst.max(check_graph(
            &[x.clone()],
            |g, v| {
                let p = g.softmax(v[0])?;
                affinity_scal(g, p, &labels, &valid, mode).map_err(contract)
            },
            |x| vec![affinity_oracle(&reference::softmax(&x[0], c), c, &labels, &valid, geo)],
            seed,
            &Tolerance::default(),
        )?);
    }
    Ok(worst)
}

/// Hard-example cross-entropy with the kept rows fixed at the input point.
pub fn ohem_gradcheck(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let (m, c) = (20, 6);
    let x = random_logits(&mut rng, m, c);
    let (labels, valid) = random_labels(&mut rng, m, c);
    let keep = ohem_keep(&x, &labels, &valid, 5, 0.3);
    if keep.iter().filter(|k| **k).count() < 5 {
        return Err("fewer rows kept than min_kept".into());
    }
    check_graph(
        &[x],
        |g, v| ohem_ce(g, v[0], &labels, &valid, 5, 0.3).map_err(contract),
        |x| vec![reference::softmax_ce(&x[0], c, &labels, &keep, None)],
        seed,
        &Tolerance::default(),
    )
}

pub fn bev_gradcheck(seed: u64, bev_kind: BevKind) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
    let (t, s) = feature_pair(&mut rng, &[3, 4, 3]);
    let masks = random_masks(&mut rng, &[4, 3]);
    let cfg = DistillConfig { bev_kind, ..weighted_cfg(&mut rng) };
    check_graph(
        &[t, s],
        |g, v| distill_bev(g, v[0], v[1], &masks, &cfg).map_err(contract),
        |x| vec![distill_oracle(&x[0], &x[1], 3, &masks, &cfg, bev_kind.into())],
        seed,
        &Tolerance::default(),
    )
}

pub fn occ_gradcheck(seed: u64, occ_kind: OccKind) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
    let (t, s) = feature_pair(&mut rng, &[4, 3, 2, 2]);
    let masks = random_masks(&mut rng, &[3, 2, 2]);
    let cfg = DistillConfig { occ_kind, ..weighted_cfg(&mut rng) };
    check_graph(
        &[t, s],
        |g, v| distill_occ(g, v[0], v[1], &masks, &cfg).map_err(contract),
        |x| vec![distill_oracle(&x[0], &x[1], 4, &masks, &cfg, occ_kind.into())],
        seed,
        &Tolerance::default(),
    )
}
