//! Grid arithmetic, pillar encoding, camera frustums and interval-based BEV
//! pooling.

mod frustum;
mod grid;
mod pillar;
mod pool;

pub use frustum::{gen_frustum, gen_frustum_multi, sample_coord, sample_index, DepthBins, FrustumCoords};
pub use grid::{grid_dims, GridLayout, GridSpec};
pub use pillar::{pillarize, scatter_bev, Pillars, PILLAR_FEATURES};
pub use pool::{bev_pool, bev_pool_backward, bev_pool_forward, precompute_intervals, IntervalTable, NO_CELL};
