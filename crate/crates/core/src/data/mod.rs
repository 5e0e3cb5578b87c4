//! Image preprocessing, annotation files, and the synthetic scene generator.

mod canvas;
mod clahe;
mod scene;
mod synth;

pub use canvas::{to_canvas, CanvasTransform};
pub use clahe::{clahe, ClaheConfig};
pub use scene::{
    load_scene, read_annotation, save_scene, write_annotation, AnnotationFile, DatasetManifest, Scene, SplitFractions,
    ToothAnnotation, ToothRecord, ANNOTATION_VERSION,
};
pub use synth::{render, scene_layout, synthesize_scene, Jitter, SceneLayout, SynthConfig, ToothStyle};

use std::path::PathBuf;

use thiserror::Error;

pub use image::GrayImage;

pub const CANVAS_W: u32 = 768;
pub const CANVAS_H: u32 = 512;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}: expected 32 teeth, found {found}")]
    ToothCount { path: PathBuf, found: usize },
    #[error("{path}: field `teeth[{entry}].id`: tooth index {index} outside 1..=32")]
    ToothIndex { path: PathBuf, entry: usize, index: u32 },
    #[error("{path}: tooth {index} listed twice")]
    DuplicateTooth { path: PathBuf, index: u32 },
    #[error("{path}: unsupported annotation version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: field `{field}`: {message}")]
    Field { path: PathBuf, field: String, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Image intensities scaled to `[0, 1]`, row-major.
pub fn normalized(image: &GrayImage) -> Vec<f64> {
    image.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect()
}
