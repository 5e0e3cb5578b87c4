//! Training objective.
//!
//! ```text
//! L = L_cen + L_dr + alpha * L_off + beta * L_box + gamma * |W|
//! ```
//!
//! The three regression terms are mean squared errors over all 64
//! coordinates. `L_dr` penalises the discrete Laplacian (interior second
//! differences) of the neighbour-distance sequence of each arch. Both `L_dr`
//! and `|W|` take either the Euclidean norm or its square.

use serde::{Deserialize, Serialize};

use crate::geometry::{PER_ARCH, TEETH};
use crate::tensor::{self, ParamSet, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Norm of the weight vector that `gamma` multiplies.
    #[serde(default)]
    pub weight_norm: Norm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 3.0, beta: 1.5, gamma: 0.1, weight_norm: Norm::Plain }
    }
}

/// Euclidean norm, or its square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    /// `sqrt(sum(v^2))`; gradient taken as 0 where the vector vanishes.
    #[default]
    Plain,
    /// `sum(v^2)`; smooth everywhere.
    Squared,
}

/// Scalar values of every objective term for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub center: f64,
    pub dr: f64,
    pub offset: f64,
    #[serde(rename = "box")]
    pub box_size: f64,
    pub weight_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.center, self.dr, self.offset, self.box_size, self.weight_reg, self.total].iter().all(|v| v.is_finite())
    }
}

fn check_len(op: &'static str, t: &Tensor, target: &[f64]) -> Result<()> {
    if t.len() != 2 * TEETH || target.len() != 2 * TEETH {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("expected 64 values, got prediction {} / target {}", t.len(), target.len()),
        });
    }
    Ok(())
}

/// MSE between predicted and annotated centers.
pub fn center_loss(predicted: &Tensor, target: &[f64]) -> Result<Tensor> {
    check_len("center_loss", predicted, target)?;
    tensor::mse(predicted, target)
}

/// MSE between predicted and target offsets.
pub fn offset_loss(predicted: &Tensor, target: &[f64]) -> Result<Tensor> {
    check_len("offset_loss", predicted, target)?;
    tensor::mse(predicted, target)
}

/// MSE between predicted and annotated `(w, h)` pairs.
pub fn box_loss(predicted: &Tensor, target: &[f64]) -> Result<Tensor> {
    check_len("box_loss", predicted, target)?;
    tensor::mse(predicted, target)
}

/// Distance-regularisation term plus the count of coincident neighbour
/// pairs, where the distance gradient was taken as 0.
#[derive(Debug, Clone)]
pub struct DrTerm {
    pub loss: Tensor,
    pub coincident: usize,
}

const DISTANCES: usize = PER_ARCH - 1;
const INTERIOR: usize = DISTANCES - 2;

struct ArchPass {
    /// unit vectors `(p[i+1] - p[i]) / d[i]`, zero where `d[i] == 0`
    dirs: [[f64; 2]; DISTANCES],
    lap: [f64; INTERIOR],
    value: f64,
    coincident: usize,
}

fn arch_pass(xy: &[f64], norm: Norm) -> ArchPass {
    let mut dirs = [[0.0; 2]; DISTANCES];
    let mut d = [0.0; DISTANCES];
    let mut coincident = 0;
    for i in 0..DISTANCES {
        let dx = xy[2 * (i + 1)] - xy[2 * i];
        let dy = xy[2 * (i + 1) + 1] - xy[2 * i + 1];
        d[i] = dx.hypot(dy);
        if d[i] > 0.0 {
            dirs[i] = [dx / d[i], dy / d[i]];
        } else {
            coincident += 1;
        }
    }
    let lap: [f64; INTERIOR] = std::array::from_fn(|j| d[j + 2] - 2.0 * d[j + 1] + d[j]);
    let sq: f64 = lap.iter().map(|v| v * v).sum();
    let value = match norm {
        Norm::Squared => sq,
        Norm::Plain => sq.sqrt(),
    };
    ArchPass { dirs, lap, value, coincident }
}

/// Distance regularisation over both arches of a flattened 64-vector.
pub fn dr_loss(points: &Tensor, norm: Norm) -> Result<DrTerm> {
    dr_loss_scaled(points, norm, 1.0)
}

/// [`dr_loss`] with its analytic gradient multiplied by `gradient_scale`.
/// Only a fault-injection hook for the gradient checker.
#[doc(hidden)]
pub fn dr_loss_scaled(points: &Tensor, norm: Norm, gradient_scale: f64) -> Result<DrTerm> {
    if points.len() != 2 * TEETH {
        return Err(TensorError::ShapeMismatch { op: "dr_loss", detail: format!("expected 64 values, got {}", points.len()) });
    }
    let data = points.data();
    let arches = [arch_pass(&data[..2 * PER_ARCH], norm), arch_pass(&data[2 * PER_ARCH..], norm)];
    let value = arches.iter().map(|a| a.value).sum();
    let coincident = arches.iter().map(|a| a.coincident).sum();

    let loss = Tensor::from_op(
        vec![1],
        vec![value],
        vec![points.clone()],
        Box::new(move |g, _| {
            let mut grad = vec![0.0; 2 * TEETH];
            for (a, arch) in arches.iter().enumerate() {
                // dL/dlap
                let scale = match norm {
                    Norm::Squared => 2.0,
                    Norm::Plain if arch.value > 0.0 => 1.0 / arch.value,
                    Norm::Plain => 0.0,
                };
                let mut gd = [0.0; DISTANCES];
                for (j, &l) in arch.lap.iter().enumerate() {
                    let gl = scale * l;
                    gd[j] += gl;
                    gd[j + 1] -= 2.0 * gl;
                    gd[j + 2] += gl;
                }
                let base = a * 2 * PER_ARCH;
                for (i, (&gdi, dir)) in gd.iter().zip(&arch.dirs).enumerate() {
                    let (gx, gy) = (gdi * dir[0], gdi * dir[1]);
                    grad[base + 2 * (i + 1)] += gx;
                    grad[base + 2 * (i + 1) + 1] += gy;
                    grad[base + 2 * i] -= gx;
                    grad[base + 2 * i + 1] -= gy;
                }
            }
            let k = g[0] * gradient_scale;
            grad.iter_mut().for_each(|v| *v *= k);
            vec![Some(grad)]
        }),
    );
    Ok(DrTerm { loss, coincident })
}

/// Task terms of one step; an absent term (ablation) contributes nothing.
#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub center: Option<Tensor>,
    pub dr: Option<Tensor>,
    pub offset: Option<Tensor>,
    pub box_size: Option<Tensor>,
}

/// Norm of the trainable parameters flagged for decay, taken as one vector.
pub fn weight_penalty(params: &ParamSet, norm: Norm) -> Tensor {
    let decayed: Vec<&Tensor> = params.iter().filter(|p| p.trainable && p.decay).map(|p| p.tensor()).collect();
    match norm {
        Norm::Plain => tensor::l2_norm(&decayed),
        Norm::Squared => tensor::sum_squares(&decayed),
    }
}

/// Weighted objective and its per-term breakdown.
pub fn total_loss(parts: &LossParts, params: &ParamSet, weights: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    let reg = weight_penalty(params, weights.weight_norm);
    let mut terms: Vec<(f64, &Tensor)> = Vec::with_capacity(5);
    let value = |t: &Option<Tensor>| t.as_ref().map_or(0.0, Tensor::item);
    let breakdown_partial = (value(&parts.center), value(&parts.dr), value(&parts.offset), value(&parts.box_size));
    for (w, t) in [(1.0, &parts.center), (1.0, &parts.dr), (weights.alpha, &parts.offset), (weights.beta, &parts.box_size)] {
        if let Some(t) = t {
            terms.push((w, t));
        }
    }
    terms.push((weights.gamma, &reg));
    let total = tensor::weighted_sum(&terms)?;
    let (center, dr, offset, box_size) = breakdown_partial;
    let breakdown = LossBreakdown { center, dr, offset, box_size, weight_reg: reg.item(), total: total.item() };
    Ok((total, breakdown))
}
