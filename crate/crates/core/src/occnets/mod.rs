//! The fusion teacher and the camera-only student.

mod config;
mod layers;
mod model;

pub use config::NetConfig;
pub use layers::Bound;
pub use model::{
    channel_to_height, encode_and_head, fuse_bev, height_to_channel, image_branch, lidar_branch, normalize_pillars,
    coord_planes, CameraView, ModelOutput, COORD_PLANES, ModelVars, SampleInput, Student, Teacher,
};
