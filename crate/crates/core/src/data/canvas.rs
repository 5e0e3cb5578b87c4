use image::imageops::{self, FilterType};
use serde::{Deserialize, Serialize};

use super::{GrayImage, CANVAS_H, CANVAS_W};
use crate::geometry::BBox;

/// How a source image was placed on the canvas: per-axis scale, then a
/// symmetric zero border.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanvasTransform {
    pub source_w: u32,
    pub source_h: u32,
    pub content_w: u32,
    pub content_h: u32,
    pub pad_x: u32,
    pub pad_y: u32,
}

impl CanvasTransform {
    /// Nominal aspect-preserving scale factor.
    pub fn scale(&self) -> f64 {
        (f64::from(CANVAS_W) / f64::from(self.source_w)).min(f64::from(CANVAS_H) / f64::from(self.source_h))
    }

    fn factors(&self) -> (f64, f64) {
        (
            f64::from(self.content_w) / f64::from(self.source_w),
            f64::from(self.content_h) / f64::from(self.source_h),
        )
    }

    pub fn is_identity(&self) -> bool {
        self.content_w == self.source_w && self.content_h == self.source_h && self.pad_x == 0 && self.pad_y == 0
    }

    pub fn box_to_canvas(&self, b: &BBox) -> BBox {
        let (sx, sy) = self.factors();
        BBox::new(b.cx * sx + f64::from(self.pad_x), b.cy * sy + f64::from(self.pad_y), b.w * sx, b.h * sy)
    }

    pub fn box_to_source(&self, b: &BBox) -> BBox {
        let (sx, sy) = self.factors();
        BBox::new((b.cx - f64::from(self.pad_x)) / sx, (b.cy - f64::from(self.pad_y)) / sy, b.w / sx, b.h / sy)
    }
}

fn placement(w: u32, h: u32) -> CanvasTransform {
    let scale = (f64::from(CANVAS_W) / f64::from(w)).min(f64::from(CANVAS_H) / f64::from(h));
    let content_w = ((f64::from(w) * scale).round() as u32).clamp(1, CANVAS_W);
    let content_h = ((f64::from(h) * scale).round() as u32).clamp(1, CANVAS_H);
    CanvasTransform {
        source_w: w,
        source_h: h,
        content_w,
        content_h,
        pad_x: (CANVAS_W - content_w) / 2,
        pad_y: (CANVAS_H - content_h) / 2,
    }
}

/// Fit any non-empty image onto the 768x512 canvas.
///
/// # Panics
/// On an empty image.
pub fn to_canvas(image: &GrayImage) -> (GrayImage, CanvasTransform) {
    let (w, h) = image.dimensions();
    assert!(w > 0 && h > 0, "to_canvas needs a non-empty image");
    let t = placement(w, h);
    if t.is_identity() {
        return (image.clone(), t);
    }
    let content = imageops::resize(image, t.content_w, t.content_h, FilterType::Triangle);
    let mut canvas = GrayImage::new(CANVAS_W, CANVAS_H);
    imageops::replace(&mut canvas, &content, i64::from(t.pad_x), i64::from(t.pad_y));
    (canvas, t)
}
