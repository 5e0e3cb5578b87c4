use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::infer::DetectionResult;
use super::net::Cascade;
use super::{ModelConfig, PATCH_HALF};
use crate::data::{AnnotationFile, DataError, CANVAS_H, CANVAS_W};
use crate::losses::{LossBreakdown, LossWeights};
use crate::tensor::{read_checkpoint, write_checkpoint, CheckpointEntry, TensorError};

pub const CHECKPOINT_FILE: &str = "checkpoint.tpckpt";
pub const MANIFEST_FILE: &str = "model.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss at step {step}: {breakdown:?}")]
    NonFinite { step: usize, breakdown: LossBreakdown },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: checkpoint does not match manifest: {message}")]
    Mismatch { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub canvas_w: u32,
    pub canvas_h: u32,
    pub offset_scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { canvas_w: CANVAS_W, canvas_h: CANVAS_H, offset_scale: PATCH_HALF }
    }
}

/// Side file describing a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub version: u32,
    pub model: ModelConfig,
    pub normalization: Normalization,
    pub loss_weights: LossWeights,
    pub parameters: Vec<(String, Vec<usize>)>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Write `checkpoint.tpckpt` and `model.json` into `dir`.
pub fn save_model(dir: &Path, net: &Cascade, weights: &LossWeights) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let entries: Vec<CheckpointEntry> = net
        .params
        .iter()
        .map(|p| CheckpointEntry { name: p.name().to_string(), shape: p.shape().to_vec(), values: p.values().to_vec() })
        .collect();
    let ckpt = dir.join(CHECKPOINT_FILE);
    let file = File::create(&ckpt).map_err(io_err(&ckpt))?;
    write_checkpoint(BufWriter::new(file), &entries).map_err(io_err(&ckpt))?;
    let manifest = ModelManifest {
        version: MANIFEST_VERSION,
        model: net.config.clone(),
        normalization: Normalization::default(),
        loss_weights: *weights,
        parameters: entries.into_iter().map(|e| (e.name, e.shape)).collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n").map_err(io_err(&path))
}

/// Rebuild the networks described by `dir/model.json` and fill them from the
/// checkpoint. Names and shapes must agree exactly.
pub fn load_model(dir: &Path) -> Result<(Cascade, ModelManifest), PipelineError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| PipelineError::Data(DataError::Parse {
        path: path.clone(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }))?;
    let mismatch = |message: String| PipelineError::Mismatch { path: dir.join(CHECKPOINT_FILE), message };
    if manifest.version != MANIFEST_VERSION {
        return Err(mismatch(format!("unsupported manifest version {}", manifest.version)));
    }
    if manifest.normalization != Normalization::default() {
        return Err(mismatch(format!("unsupported normalization {:?}", manifest.normalization)));
    }
    manifest.model.validate().map_err(PipelineError::Config)?;
    let mut net = Cascade::new(manifest.model.clone(), 0);

    let ckpt = dir.join(CHECKPOINT_FILE);
    let file = File::open(&ckpt).map_err(io_err(&ckpt))?;
    let entries = read_checkpoint(BufReader::new(file)).map_err(io_err(&ckpt))?;
    if entries.len() != net.params.len() {
        return Err(mismatch(format!("{} tensors in checkpoint, model has {}", entries.len(), net.params.len())));
    }
    for e in entries {
        let declared = manifest.parameters.iter().find(|(n, _)| *n == e.name);
        let id = net.params.id_of(&e.name).ok_or_else(|| mismatch(format!("unknown parameter `{}`", e.name)))?;
        let p = net.params.get_mut(id);
        if p.shape() != e.shape.as_slice() || declared.map(|(_, s)| s) != Some(&e.shape) {
            return Err(mismatch(format!("`{}` has shape {:?}, model expects {:?}", e.name, e.shape, p.shape())));
        }
        p.set_values(e.values)?;
    }
    Ok((net, manifest))
}

/// Detections in the annotation schema, flagged as predictions.
pub fn export_detections(result: &DetectionResult, image_rel: &str) -> AnnotationFile {
    AnnotationFile::from_teeth(image_rel, &result.annotations(), true)
}
