//! Region decomposition and occupancy metrics.

mod metrics;
mod regions;

pub use metrics::{
    confusion, confusion_labels, geo_iou, geo_iou_labels, miou, miou_ignoring, ConfusionMatrix, IouSummary,
    MetricsReport,
};
pub use regions::{decompose_logits, decompose_regions, project_regions_bev, ClassMap, Region, RegionMasks};
