//! The two-stage cascade.
//!
//! Stage 1 maps the (pooled) canvas image to a 64-vector of tooth centers
//! through a conv backbone, a pooling layer and one fully connected layer. Its last feature map is upsampled to canvas resolution and
//! concatenated with the image; a 128x128 window around each rounded center
//! is cut out and fed to a shared stage-2 network that predicts a center
//! offset and the box extents.
//!
//! Every conv block of both networks sees two constant coordinate channels
//! next to its input. Pooling keeps, per channel, the mean activation and
//! the activation-weighted mean position; plain averaging is translation
//! invariant and leaves the heads nothing to regress a position from. The FC
//! heads subtract a running mean of their input, held outside the trainable
//! set.

mod infer;
mod io;
mod net;
mod train;

pub use infer::{infer, measure_fps, DetectionResult, ToothDetection};
pub use io::{export_detections, load_model, save_model, ModelManifest, PipelineError, CHECKPOINT_FILE, MANIFEST_FILE};
pub use net::{
    crop_patches, crop_pooled_patches, patch_origin, stage1_forward, stage2_forward, stage2_forward_pooled, Cascade,
    Stage1Output, Stage2Output,
};
pub use train::{
    evaluate_centers, train, train_step, PreparedScene, StepOutcome, TrainConfig, TrainReport, ValidationRecord,
};

use serde::{Deserialize, Serialize};

use crate::data::{ClaheConfig, CANVAS_H, CANVAS_W};

pub const PATCH: usize = 128;
pub const PATCH_HALF: f64 = 64.0;

/// Conv stack of 3x3 blocks; every other block halves the resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub name: String,
    /// Mean-pool factor applied to the canvas before the first block.
    pub input_pool: usize,
    /// Output channels per block.
    pub channels: Vec<usize>,
}

impl BackboneConfig {
    /// Canvas pooled 4x, then `[8, 8, 16, 16, 16, 16]`: features at 1/32 of
    /// the canvas. Sized for a single CPU core.
    pub fn desk() -> Self {
        Self { name: "desk".into(), input_pool: 4, channels: vec![8, 8, 16, 16, 16, 16] }
    }

    /// Full-resolution input, `[8, 8, 16, 16, 32, 32]`: features at 1/8.
    pub fn reference() -> Self {
        Self { name: "reference".into(), input_pool: 1, channels: vec![8, 8, 16, 16, 32, 32] }
    }

    /// Two blocks of 4 channels; only for tests.
    pub fn tiny() -> Self {
        Self { name: "tiny".into(), input_pool: 8, channels: vec![4, 4] }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "reference" => Some(Self::reference()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn stride(block: usize) -> usize {
        if block % 2 == 1 {
            2
        } else {
            1
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    /// Spatial extent `(h, w)` of the final feature map.
    pub fn feature_size(&self) -> (usize, usize) {
        let (mut h, mut w) = (CANVAS_H as usize / self.input_pool, CANVAS_W as usize / self.input_pool);
        for b in 0..self.channels.len() {
            let s = Self::stride(b);
            h = (h - 1) / s + 1;
            w = (w - 1) / s + 1;
        }
        (h, w)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(format!("backbone `{}` needs non-zero channel counts", self.name));
        }
        let pool = self.input_pool;
        if pool == 0 || CANVAS_W as usize % pool != 0 || CANVAS_H as usize % pool != 0 {
            return Err(format!("input_pool {pool} must divide the 768x512 canvas"));
        }
        Ok(())
    }
}

/// Patch network: mean-pool, conv blocks, then two GAP + FC heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub input_pool: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self { input_pool: 4, channels: vec![12, 16, 16], strides: vec![2, 1, 2] }
    }
}

impl Stage2Config {
    pub fn tiny() -> Self {
        Self { input_pool: 16, channels: vec![4], strides: vec![1] }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err("stage2 needs one stride per block".into());
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return Err("stage2 channels and strides must be positive".into());
        }
        if self.input_pool == 0 || PATCH % self.input_pool != 0 {
            return Err(format!("stage2 input_pool {} must divide {PATCH}", self.input_pool));
        }
        Ok(())
    }
}

/// Architecture plus everything needed to decode its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub stage2: Stage2Config,
    /// Applied to every image before it enters the network.
    pub clahe: Option<ClaheConfig>,
    /// Whether refined centers use the offset head. Off in the no-offset
    /// ablation, where the head is never trained.
    pub offset_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::desk(),
            stage2: Stage2Config::default(),
            clahe: Some(ClaheConfig::default()),
            offset_head: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.backbone.validate()?;
        self.stage2.validate()
    }
}

/// Pixel extents that decode normalised head outputs.
pub fn decode_scale() -> [f64; 2] {
    [f64::from(CANVAS_W), f64::from(CANVAS_H)]
}
