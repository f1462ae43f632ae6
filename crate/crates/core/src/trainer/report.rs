use serde::{Deserialize, Serialize};

use super::train::{ModelKind, RunReport};
use crate::error::{Error, Result};

/// Seed-averaged mIoU of the three model families at one label fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub fraction: f64,
    pub teacher: f64,
    pub scratch: f64,
    pub distilled: f64,
    pub seeds: usize,
}

const KINDS: [ModelKind; 3] = [ModelKind::Teacher, ModelKind::Scratch, ModelKind::Distilled];

/// Groups reports by fraction (ascending) and averages each family over
/// seeds. Every fraction must have all three families with equal seed
/// counts.
pub fn efficiency_table(reports: &[RunReport]) -> Result<Vec<EfficiencyRow>> {
    let mut fractions: Vec<f64> = reports.iter().map(|r| r.fraction).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let mut rows = Vec::with_capacity(fractions.len());
    for f in fractions {
        let mut means = [0.0; 3];
        let mut seeds = None;
        for (k, kind) in KINDS.iter().enumerate() {
            let v: Vec<f64> = reports.iter().filter(|r| r.fraction == f && r.model == *kind).map(|r| r.miou).collect();
            if v.is_empty() {
                return Err(Error::Config(format!("no {} runs at fraction {f}", kind.name())));
            }
            if *seeds.get_or_insert(v.len()) != v.len() {
                return Err(Error::Config(format!("unequal seed counts at fraction {f}")));
            }
            means[k] = v.iter().sum::<f64>() / v.len() as f64;
        }
        rows.push(EfficiencyRow { fraction: f, teacher: means[0], scratch: means[1], distilled: means[2], seeds: seeds.unwrap_or(0) });
    }
    Ok(rows)
}

/// `labeled,teacher,scratch,distilled` with percentages of labeled scenes
/// and mIoU in percent.
pub fn table_csv(rows: &[EfficiencyRow]) -> String {
    let mut out = String::from("labeled,teacher,scratch,distilled\n");
    for r in rows {
        out.push_str(&format!(
            "{}%,{:.2},{:.2},{:.2}\n",
            (r.fraction * 100.0).round(),
            r.teacher * 100.0,
            r.scratch * 100.0,
            r.distilled * 100.0
        ));
    }
    out
}

/// Long-format plot series: one `family,fraction,miou` line per point.
pub fn series_csv(rows: &[EfficiencyRow]) -> String {
    let mut out = String::from("family,fraction,miou\n");
    for (k, kind) in KINDS.iter().enumerate() {
        for r in rows {
            let v = [r.teacher, r.scratch, r.distilled][k];
            out.push_str(&format!("{},{},{:.6}\n", kind.name(), r.fraction, v));
        }
    }
    out
}

/// Per-run lines, wall time excluded.
pub fn runs_csv(reports: &[RunReport]) -> String {
    let mut out = String::from("model,fraction,seed,labeled_scenes,miou,geo_iou,final_loss,config_hash\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{},{},{}\n",
            r.model.name(),
            r.fraction,
            r.seed,
            r.labeled_scenes,
            r.miou,
            r.geo_iou.map_or(String::new(), |g| format!("{g:.6}")),
            r.epoch_loss.last().map_or(String::new(), |l| format!("{l:.6}")),
            r.config_hash
        ));
    }
    out
}
