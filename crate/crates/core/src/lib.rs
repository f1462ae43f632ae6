//! Occupancy learning on synthetic scenes: a lidar-camera fusion teacher and
//! a camera-only student over a voxel grid, trained with supervised losses
//! and region-weighted feature distillation.

pub mod classes;
pub mod error;
pub mod evalkit;
pub mod geom;
pub mod losses;
pub mod occnets;
pub mod par;
pub mod projection;
pub mod scenegen;
pub mod trainer;

pub use error::{Error, Result};
