//! Supervised occupancy losses and region-normalised feature distillation.

mod distill;
mod supervised;

pub use distill::{
    distill_bev, distill_occ, distill_total, distill_total_var, region_coefficients, region_distill, BevKind,
    DistillConfig, OccKind, PairKind,
};
pub use supervised::{
    affinity_scal, cross_entropy, lovasz_softmax, ohem_ce, ohem_keep, supervised_loss, total_supervised,
    weighted_sum, LossWeights, OhemConfig, ScalMode, SupervisedConfig,
};
