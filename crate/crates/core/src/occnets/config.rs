use serde::{Deserialize, Serialize};

use crate::classes::NUM_LOGITS;
use crate::error::{Error, Result};
use crate::projection::{DepthBins, GridSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub grid: GridSpec,
    /// Logits per voxel, the empty id included.
    pub num_classes: usize,
    /// Width of the full-resolution image encoder.
    pub image_channels: usize,
    /// 3x3 conv layers in the image encoder.
    pub image_layers: usize,
    /// Channels of the lifted camera BEV map.
    pub cam_channels: usize,
    pub lidar_channels: usize,
    /// Width of the fused BEV map and the BEV encoder.
    pub fused_channels: usize,
    pub encoder_blocks: usize,
    /// Per-height channels of the 3D feature.
    pub occ_channels: usize,
    pub depth: DepthBins,
    /// Image pixels lifted every `pixel_stride` rows and columns.
    pub pixel_stride: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec { range: [-16.0, -16.0, -2.0, 16.0, 16.0, 2.0], voxel: 0.5 },
            num_classes: NUM_LOGITS,
            image_channels: 8,
            image_layers: 4,
            cam_channels: 16,
            lidar_channels: 16,
            fused_channels: 16,
            encoder_blocks: 2,
            occ_channels: 8,
            depth: DepthBins::default(),
            pixel_stride: 4,
        }
    }
}

impl NetConfig {
    pub fn dims(&self) -> Result<[usize; 3]> {
        self.grid.dims()
    }

    /// Output channels of the classification conv, `H · C`.
    pub fn head_channels(&self) -> Result<usize> {
        Ok(self.dims()?[2] * self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        self.depth.depths()?;
        let widths = [
            ("num_classes", self.num_classes),
            ("image_channels", self.image_channels),
            ("image_layers", self.image_layers),
            ("cam_channels", self.cam_channels),
            ("lidar_channels", self.lidar_channels),
            ("fused_channels", self.fused_channels),
            ("occ_channels", self.occ_channels),
            ("pixel_stride", self.pixel_stride),
        ];
        if let Some((name, _)) = widths.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        Ok(())
    }
}
