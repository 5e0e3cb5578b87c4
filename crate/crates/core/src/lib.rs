//! Point-wise tooth detection and identification on panoramic radiographs.
//!
//! A first network regresses the centers of all 32 anatomical teeth at once,
//! regularized so that spacing between neighbours varies smoothly. A second,
//! patch-based network refines each center with an offset and regresses the
//! box extents. Identifiers follow from the fixed output slot, so no
//! classifier is involved.
//!
//! Modules:
//!
//! - [`tensor`]: dense tensors with reverse-mode differentiation.
//! - [`geometry`]: points, boxes, tooth numbering, IoU.
//! - [`losses`]: the training objective terms.
//! - [`data`]: CLAHE, canvas normalisation, annotation I/O, scene synthesis.
//! - [`pipeline`]: the two-stage cascade, training and inference.
//! - [`eval`]: matching, AP sweep, mIoU, identification metrics.
//! - [`gradcheck`]: finite-difference verification of every gradient.

pub mod tensor;
pub mod geometry;
pub mod losses;
pub mod data;
pub mod pipeline;
pub mod eval;
pub mod gradcheck;
