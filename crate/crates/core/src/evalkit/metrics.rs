use serde::{Deserialize, Serialize};

use crate::classes::{EMPTY, NAMES, NUM_LOGITS};
use crate::error::{Error, Result};
use crate::scenegen::SemGrid;

/// `counts[gt * n + pred]` over evaluated voxels; the empty id has its own
/// row and column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self { n, counts: vec![0; n * n] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..self.n).filter(|&g| g != c).map(|g| self.get(g, c)).sum()
    }

    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.n).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    /// Element-wise sum; merging is order-independent.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Dimension(format!("confusion sizes {} and {}", self.n, other.n)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion_labels(pred: &[u8], gt: &[u8], mask: &[bool], n: usize) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::Dimension(format!(
            "pred {} / gt {} / mask {} lengths differ",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(n);
    for i in 0..gt.len() {
        if !mask[i] {
            continue;
        }
        let (g, p) = (gt[i] as usize, pred[i] as usize);
        if g >= n || p >= n {
            return Err(Error::Config(format!("label out of range at voxel {i}: gt {g}, pred {p}")));
        }
        cm.counts[g * n + p] += 1;
    }
    Ok(cm)
}

pub fn confusion(pred: &SemGrid, gt: &SemGrid, eval_mask: &[bool]) -> Result<ConfusionMatrix> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dimension(format!("grid dims {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    confusion_labels(&pred.labels, &gt.labels, eval_mask, NUM_LOGITS)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    /// Per semantic class (the empty id excluded); `None` when the class is
    /// absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// `TP / (TP + FP + FN)` per class except `ignore`, averaged over the
/// classes that occur.
pub fn miou_ignoring(cm: &ConfusionMatrix, ignore: Option<usize>) -> Result<IouSummary> {
    let mut per_class = Vec::with_capacity(cm.n);
    let (mut sum, mut count) = (0.0, 0usize);
    for c in (0..cm.n).filter(|&c| Some(c) != ignore) {
        let denom = cm.tp(c) + cm.fp(c) + cm.fn_(c);
        if denom == 0 {
            per_class.push(None);
            continue;
        }
        let iou = cm.tp(c) as f64 / denom as f64;
        sum += iou;
        count += 1;
        per_class.push(Some(iou));
    }
    if count == 0 {
        return Err(Error::Degenerate("no class occurs in prediction or ground truth".into()));
    }
    Ok(IouSummary { per_class, miou: sum / count as f64 })
}

/// Semantic mIoU with the empty id excluded.
pub fn miou(cm: &ConfusionMatrix) -> Result<IouSummary> {
    miou_ignoring(cm, Some(EMPTY as usize))
}

/// IoU of the occupied class after binarising both grids.
pub fn geo_iou_labels(pred: &[u8], gt: &[u8], mask: &[bool]) -> Result<f64> {
    let bin = |v: &[u8]| v.iter().map(|&l| (l != EMPTY) as u8).collect::<Vec<u8>>();
    let cm = confusion_labels(&bin(pred), &bin(gt), mask, 2)?;
    let denom = cm.tp(1) + cm.fp(1) + cm.fn_(1);
    if denom == 0 {
        return Err(Error::Degenerate("no occupied voxel in prediction or ground truth".into()));
    }
    Ok(cm.tp(1) as f64 / denom as f64)
}

pub fn geo_iou(pred: &SemGrid, gt: &SemGrid, eval_mask: &[bool]) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dimension(format!("grid dims {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    geo_iou_labels(&pred.labels, &gt.labels, eval_mask)
}

/// Evaluation summary written by the command line tools.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub geo_iou: Option<f64>,
    pub evaluated_voxels: u64,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        let s = miou(&cm)?;
        // Occupied vs empty collapsed from the full matrix.
        let e = EMPTY as usize;
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for g in 0..cm.n {
            for p in 0..cm.n {
                let v = cm.get(g, p);
                match (g != e, p != e) {
                    (true, true) => tp += v,
                    (false, true) => fp += v,
                    (true, false) => fn_ += v,
                    _ => {}
                }
            }
        }
        let geo = (tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64);
        Ok(Self {
            classes: NAMES[..NUM_LOGITS].iter().filter(|n| **n != NAMES[e]).map(|s| s.to_string()).collect(),
            per_class_iou: s.per_class,
            miou: s.miou,
            geo_iou: geo,
            evaluated_voxels: cm.total(),
            confusion: cm,
        })
    }

    /// `class,iou` rows; absent classes get an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou\n");
        for (name, iou) in self.classes.iter().zip(&self.per_class_iou) {
            match iou {
                Some(v) => out.push_str(&format!("{name},{v:.6}\n")),
                None => out.push_str(&format!("{name},\n")),
            }
        }
        out.push_str(&format!("mIoU,{:.6}\n", self.miou));
        if let Some(g) = self.geo_iou {
            out.push_str(&format!("geo_IoU,{g:.6}\n"));
        }
        out
    }
}
