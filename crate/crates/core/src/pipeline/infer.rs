use std::time::Instant;

use serde::Serialize;

use super::net::{crop_pooled_patches, stage1_forward, stage2_forward_pooled, Cascade};
use super::train::{image_tensor, preprocess};
use super::PipelineError;
use crate::data::{GrayImage, ToothAnnotation};
use crate::geometry::{box_from_prediction, BBox, Point2, PointSet32, ToothId, TEETH};
use crate::tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ToothDetection {
    pub tooth: ToothId,
    pub stage1_center: Point2,
    pub refined_center: Point2,
    pub bbox: BBox,
    /// The predicted extent was degenerate and got clamped.
    pub clamped: bool,
}

/// All 32 teeth, ordered by tooth index.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionResult {
    pub teeth: Vec<ToothDetection>,
}

impl DetectionResult {
    pub fn boxes(&self) -> Vec<BBox> {
        self.teeth.iter().map(|t| t.bbox).collect()
    }

    pub fn ids(&self) -> Vec<ToothId> {
        self.teeth.iter().map(|t| t.tooth).collect()
    }

    /// As annotations; every tooth is marked present.
    pub fn annotations(&self) -> Vec<ToothAnnotation> {
        self.teeth.iter().map(|t| ToothAnnotation { tooth: t.tooth, present: true, bbox: t.bbox }).collect()
    }
}

/// Raw outputs in flattened point order.
pub(crate) struct RawOutputs {
    pub stage1: Vec<[f64; 2]>,
    pub refined: Vec<[f64; 2]>,
    pub sizes: Vec<[f64; 2]>,
}

/// Forward pass on an already preprocessed canvas image.
pub(crate) fn run(net: &Cascade, image: &GrayImage) -> Result<RawOutputs, PipelineError> {
    let x = image_tensor(image);
    let s1 = stage1_forward(net, &x)?;
    let estimate = PointSet32::from_flat(s1.centers.data()).expect("64 outputs");
    let patches = crop_pooled_patches(net, &x, &s1.features, &estimate)?;
    let mut raw = RawOutputs { stage1: Vec::new(), refined: Vec::new(), sizes: Vec::new() };
    for (p, c) in patches.iter().zip(estimate.iter()) {
        let out = stage2_forward_pooled(net, p)?;
        let off = if net.config.offset_head { [out.offset.data()[0], out.offset.data()[1]] } else { [0.0, 0.0] };
        raw.stage1.push([c.x, c.y]);
        raw.refined.push([c.x + off[0], c.y + off[1]]);
        raw.sizes.push([out.size.data()[0], out.size.data()[1]]);
    }
    Ok(raw)
}

/// Detect all 32 teeth on a 768x512 canvas image. Identifiers are the output
/// slots themselves.
pub fn infer(image: &GrayImage, net: &Cascade) -> Result<DetectionResult, PipelineError> {
    let image = preprocess(image, &net.config)?;
    let raw = tensor::no_grad(|| run(net, &image))?;
    let mut teeth: Vec<ToothDetection> = (0..TEETH)
        .map(|p| {
            let [sx, sy] = raw.stage1[p];
            let [rx, ry] = raw.refined[p];
            let b = box_from_prediction(Point2::new(sx, sy), [rx - sx, ry - sy], raw.sizes[p]);
            ToothDetection {
                tooth: ToothId::from_flat(p),
                stage1_center: Point2::new(sx, sy),
                refined_center: Point2::new(rx, ry),
                bbox: b.bbox,
                clamped: b.clamped,
            }
        })
        .collect();
    teeth.sort_by_key(|t| t.tooth);
    Ok(DetectionResult { teeth })
}

/// Inference throughput over `images` after `warmup` untimed passes (cycling
/// through the list).
pub fn measure_fps(net: &Cascade, images: &[GrayImage], warmup: usize) -> Result<f64, PipelineError> {
    if images.len() < 10 {
        return Err(PipelineError::Config(format!("measure_fps needs at least 10 images, got {}", images.len())));
    }
    for img in images.iter().cycle().take(warmup) {
        infer(img, net)?;
    }
    let start = Instant::now();
    for img in images {
        infer(img, net)?;
    }
    Ok(images.len() as f64 / start.elapsed().as_secs_f64())
}
