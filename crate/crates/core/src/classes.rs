//! Label space of the synthetic benchmark.
//!
//! Ids `0..NUM_CLASSES` are semantic classes, [`EMPTY`] marks free space and
//! doubles as the last logit index, so networks predict
//! [`NUM_LOGITS`] channels and a label id equals its logit index.

pub const CAR: u8 = 0;
pub const PEDESTRIAN: u8 = 1;
pub const BARRIER: u8 = 2;
pub const ROAD: u8 = 3;
pub const TERRAIN: u8 = 4;
pub const EMPTY: u8 = 5;

pub const NUM_CLASSES: usize = 5;
pub const NUM_LOGITS: usize = NUM_CLASSES + 1;

/// Camera pixel that sees nothing.
pub const VOID: u8 = 255;

pub const NAMES: [&str; NUM_LOGITS] = ["car", "pedestrian", "barrier", "road", "terrain", "empty"];

/// Object classes.
pub fn is_thing(c: u8) -> bool {
    c <= BARRIER
}

/// Surface classes.
pub fn is_stuff(c: u8) -> bool {
    c == ROAD || c == TERRAIN
}

/// Mean lidar intensity per class.
pub fn intensity(c: u8) -> f32 {
    match c {
        CAR => 0.8,
        PEDESTRIAN => 0.35,
        BARRIER => 0.6,
        ROAD => 0.1,
        TERRAIN => 0.4,
        _ => 0.0,
    }
}

/// Albedo used by the camera renderer; index [`NUM_CLASSES`] is the sky.
pub fn color(c: u8) -> [f32; 3] {
    match c {
        CAR => [0.85, 0.15, 0.15],
        PEDESTRIAN => [0.15, 0.8, 0.25],
        BARRIER => [0.9, 0.75, 0.1],
        ROAD => [0.3, 0.3, 0.35],
        TERRAIN => [0.45, 0.35, 0.15],
        _ => [0.55, 0.7, 0.95],
    }
}
