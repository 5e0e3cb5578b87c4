//! Points, axis-aligned boxes, tooth numbering, and the small amount of
//! arithmetic shared by the losses, the cascade, and evaluation.
//!
//! Teeth are numbered 1..=32 (universal numbering). Within an arch, slots run
//! left to right in image coordinates. Upper slot `s` is tooth `s + 1`; lower
//! slot `s` is tooth `32 - s`. Flattened point vectors list the 16 upper
//! slots, then the 16 lower slots, each as `(x, y)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TEETH: usize = 32;
pub const PER_ARCH: usize = 16;
/// Smallest box extent produced at inference, in pixels.
pub const MIN_EXTENT: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("tooth index {0} outside 1..=32")]
    ToothIndex(u32),
    #[error("expected 64 coordinates, got {0}")]
    FlatLength(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned box stored as center and extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    // areas from the same corner arithmetic, so identical boxes give exactly 1
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    Upper,
    Lower,
}

/// One of the 32 anatomical tooth positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct ToothId(u8);

impl ToothId {
    pub fn new(index: u32) -> Result<Self, GeometryError> {
        if (1..=TEETH as u32).contains(&index) {
            Ok(Self(index as u8))
        } else {
            Err(GeometryError::ToothIndex(index))
        }
    }

    pub fn from_arch_slot(arch: Arch, slot: usize) -> Self {
        assert!(slot < PER_ARCH, "slot {slot} out of range");
        match arch {
            Arch::Upper => Self(slot as u8 + 1),
            Arch::Lower => Self(32 - slot as u8),
        }
    }

    /// Position in the flattened upper-then-lower ordering (0..32).
    pub fn from_flat(position: usize) -> Self {
        if position < PER_ARCH {
            Self::from_arch_slot(Arch::Upper, position)
        } else {
            Self::from_arch_slot(Arch::Lower, position - PER_ARCH)
        }
    }

    pub fn index(self) -> u32 {
        self.0 as u32
    }

    pub fn arch(self) -> Arch {
        if self.0 <= 16 {
            Arch::Upper
        } else {
            Arch::Lower
        }
    }

    pub fn slot(self) -> usize {
        match self.arch() {
            Arch::Upper => self.0 as usize - 1,
            Arch::Lower => 32 - self.0 as usize,
        }
    }

    pub fn flat(self) -> usize {
        match self.arch() {
            Arch::Upper => self.slot(),
            Arch::Lower => PER_ARCH + self.slot(),
        }
    }

    pub fn all() -> impl Iterator<Item = ToothId> {
        (1..=TEETH as u8).map(ToothId)
    }
}

impl TryFrom<u32> for ToothId {
    type Error = GeometryError;
    fn try_from(v: u32) -> Result<Self, Self::Error> {
        ToothId::new(v)
    }
}

impl From<ToothId> for u32 {
    fn from(t: ToothId) -> u32 {
        t.index()
    }
}

impl std::fmt::Display for ToothId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Centers of all 32 teeth, split by arch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSet32 {
    pub upper: [Point2; PER_ARCH],
    pub lower: [Point2; PER_ARCH],
}

impl PointSet32 {
    pub fn from_flat(v: &[f64]) -> Result<Self, GeometryError> {
        if v.len() != 2 * TEETH {
            return Err(GeometryError::FlatLength(v.len()));
        }
        let pt = |i: usize| Point2::new(v[2 * i], v[2 * i + 1]);
        Ok(Self {
            upper: std::array::from_fn(pt),
            lower: std::array::from_fn(|i| pt(i + PER_ARCH)),
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    /// Points in flattened order.
    pub fn iter(&self) -> impl Iterator<Item = Point2> + '_ {
        self.upper.iter().chain(self.lower.iter()).copied()
    }

    pub fn get(&self, tooth: ToothId) -> Point2 {
        match tooth.arch() {
            Arch::Upper => self.upper[tooth.slot()],
            Arch::Lower => self.lower[tooth.slot()],
        }
    }
}

/// `ground_truth - estimated`, elementwise over the flattened coordinates.
pub fn offset_target(estimated: &PointSet32, ground_truth: &PointSet32) -> Vec<f64> {
    ground_truth.to_flat().iter().zip(estimated.to_flat()).map(|(g, e)| g - e).collect()
}

/// Euclidean distance between consecutive slots of one arch.
pub fn neighbor_distances(arch: &[Point2; PER_ARCH]) -> [f64; PER_ARCH - 1] {
    std::array::from_fn(|i| arch[i + 1].distance(arch[i]))
}

/// Box assembled from a stage-1 center, a refinement offset, and extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedBox {
    pub bbox: BBox,
    /// An extent was at or below [`MIN_EXTENT`] and got clamped.
    pub clamped: bool,
}

pub fn box_from_prediction(center: Point2, offset: [f64; 2], size: [f64; 2]) -> PredictedBox {
    let clamp = |v: f64| if v > MIN_EXTENT { v } else { MIN_EXTENT };
    let clamped = !(size[0] > MIN_EXTENT && size[1] > MIN_EXTENT);
    PredictedBox {
        bbox: BBox::new(center.x + offset[0], center.y + offset[1], clamp(size[0]), clamp(size[1])),
        clamped,
    }
}
