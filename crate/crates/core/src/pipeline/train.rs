use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{crop_pooled_patches, stage1_forward, stage2_forward_pooled, Cascade};
use super::{ModelConfig, PipelineError};
use crate::data::{normalized, GrayImage, Scene, CANVAS_H, CANVAS_W};
use crate::geometry::{offset_target, PointSet32, TEETH};
use crate::losses::{self, Norm, LossBreakdown, LossParts, LossWeights};
use crate::tensor::{self, Optimizer, OptimizerConfig, OptimizerKind, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Cosine decay from `learning_rate` down to this fraction of it.
    pub final_lr_fraction: f64,
    pub iterations: usize,
    pub loss_weights: LossWeights,
    pub dr_norm: Norm,
    pub use_dr: bool,
    pub use_offset: bool,
    /// Leading fraction of `iterations` that optimises stage 1 alone.
    pub stage1_warmup: f64,
    /// Start the output biases at the training-set mean targets.
    pub init_from_data: bool,
    /// Learning-rate multiplier for the FC heads.
    pub head_lr_scale: f64,
    /// Validation period in steps; 0 means once per pass over the data.
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerKind::adam(),
            learning_rate: 2e-4,
            final_lr_fraction: 0.05,
            iterations: 12000,
            loss_weights: LossWeights::default(),
            dr_norm: Norm::Plain,
            use_dr: true,
            use_offset: true,
            stage1_warmup: 1.0 / 3.0,
            init_from_data: true,
            head_lr_scale: 10.0,
            validate_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.head_lr_scale > 0.0 && self.head_lr_scale.is_finite()) {
            return Err(format!("head_lr_scale must be positive, got {}", self.head_lr_scale));
        }
        if !(0.0..=1.0).contains(&self.stage1_warmup) {
            return Err(format!("stage1_warmup {} outside [0, 1]", self.stage1_warmup));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(format!("final_lr_fraction {} outside [0, 1]", self.final_lr_fraction));
        }
        let w = &self.loss_weights;
        if [w.alpha, w.beta, w.gamma].iter().any(|v| !(*v >= 0.0)) {
            return Err("loss weights must be non-negative".into());
        }
        Ok(())
    }

    /// First step of joint training.
    pub fn warmup_steps(&self) -> usize {
        (self.stage1_warmup * self.iterations as f64).round() as usize
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.iterations <= 1 {
            return self.learning_rate;
        }
        let t = step as f64 / (self.iterations - 1) as f64;
        let f = self.final_lr_fraction;
        self.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

/// A scene with its network input and flattened targets.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    /// After preprocessing.
    pub image: GrayImage,
    pub truth: PointSet32,
    pub centers: Vec<f64>,
    pub sizes: Vec<f64>,
}

impl PreparedScene {
    pub fn new(scene: &Scene, model: &ModelConfig) -> Result<Self, PipelineError> {
        let image = preprocess(&scene.image, model)?;
        let truth = scene.centers();
        Ok(Self { image, centers: truth.to_flat(), truth, sizes: scene.sizes() })
    }

    pub fn tensor(&self) -> Tensor {
        image_tensor(&self.image)
    }
}

pub(crate) fn preprocess(image: &GrayImage, model: &ModelConfig) -> Result<GrayImage, PipelineError> {
    if image.dimensions() != (CANVAS_W, CANVAS_H) {
        return Err(PipelineError::Config(format!("expected a 768x512 canvas image, got {:?}", image.dimensions())));
    }
    match &model.clahe {
        Some(c) => c.apply(image).map_err(PipelineError::Data),
        None => Ok(image.clone()),
    }
}

pub(crate) fn image_tensor(image: &GrayImage) -> Tensor {
    Tensor::new(&[1, CANVAS_H as usize, CANVAS_W as usize], normalized(image)).expect("canvas sized")
}

/// Per-step rate of the running feature means feeding the heads.
const MEAN_RATE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    /// Coincident neighbour pairs in the stage-1 estimate.
    pub coincident: usize,
}

/// Pooled head inputs seen during one forward pass, one vector per sample;
/// stage 2 is empty when it did not run.
#[derive(Debug, Default)]
struct PooledFeatures {
    stage1: Vec<Vec<f64>>,
    stage2: Vec<Vec<f64>>,
}

/// Build the step objective on a fresh graph.
fn objective(
    net: &Cascade,
    scene: &PreparedScene,
    config: &TrainConfig,
    joint: bool,
) -> Result<(Tensor, StepOutcome, PooledFeatures), PipelineError> {
    let image = scene.tensor();
    let s1 = stage1_forward(net, &image)?;
    let estimate = PointSet32::from_flat(s1.centers.data()).expect("64 outputs");
    let mut parts = LossParts { center: Some(losses::center_loss(&s1.centers, &scene.centers)?), ..Default::default() };
    let mut coincident = 0;
    let mut pooled = PooledFeatures { stage1: vec![s1.pooled.data().to_vec()], stage2: Vec::new() };
    if config.use_dr {
        let term = losses::dr_loss(&s1.centers, config.dr_norm)?;
        coincident = term.coincident;
        parts.dr = Some(term.loss);
    }
    if joint {
        let patches = crop_pooled_patches(net, &image, &s1.features, &estimate)?;
        let mut offsets = Vec::with_capacity(TEETH);
        let mut sizes = Vec::with_capacity(TEETH);
        for p in &patches {
            let out = stage2_forward_pooled(net, p)?;
            offsets.push(out.offset);
            sizes.push(out.size);
            pooled.stage2.push(out.pooled.data().to_vec());
        }
        if config.use_offset {
            let pred = tensor::concat(&offsets.iter().collect::<Vec<_>>());
            // target against the detached current estimate
            parts.offset = Some(losses::offset_loss(&pred, &offset_target(&estimate, &scene.truth))?);
        }
        let pred = tensor::concat(&sizes.iter().collect::<Vec<_>>());
        parts.box_size = Some(losses::box_loss(&pred, &scene.sizes)?);
    }
    let (total, breakdown) = losses::total_loss(&parts, &net.params, &config.loss_weights)?;
    Ok((total, StepOutcome { breakdown, coincident }, pooled))
}

/// Mark which parameters the coming update may touch.
fn set_trainable(net: &mut Cascade, config: &TrainConfig, joint: bool) {
    let stage2 = net.stage2_ids();
    let offset = net.offset_head_ids();
    reset_trainable(net);
    for id in stage2 {
        net.params.get_mut(id).trainable = joint;
    }
    for id in offset {
        net.params.get_mut(id).trainable = joint && config.use_offset;
    }
}

/// Everything trainable except the feature means.
fn reset_trainable(net: &mut Cascade) {
    for p in net.params.iter_mut() {
        p.trainable = true;
    }
    for id in net.feature_mean_ids() {
        net.params.get_mut(id).trainable = false;
    }
}

/// One forward/backward pass and one update at learning rate `lr`.
pub fn train_step(
    net: &mut Cascade,
    optimizer: &mut Optimizer,
    scene: &PreparedScene,
    config: &TrainConfig,
    step: usize,
    lr: f64,
) -> Result<StepOutcome, PipelineError> {
    let joint = step >= config.warmup_steps();
    set_trainable(net, config, joint);
    let (total, outcome, pooled) = objective(net, scene, config, joint)?;
    if !outcome.breakdown.is_finite() {
        return Err(PipelineError::NonFinite { step, breakdown: outcome.breakdown });
    }
    total.backward()?;
    optimizer.step_with_lr(&mut net.params, lr)?;
    net.track_feature_means(&pooled.stage1, &pooled.stage2, MEAN_RATE);
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub step: usize,
    /// Stage-1 center MSE, px^2.
    pub mse1: f64,
    /// MSE after the offset refinement, px^2.
    pub mse2: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub history: Vec<(usize, LossBreakdown)>,
    pub validation: Vec<ValidationRecord>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn final_validation(&self) -> Option<&ValidationRecord> {
        self.validation.last()
    }
}

/// Stage-1 and refined center MSE averaged over `scenes`.
pub fn evaluate_centers(net: &Cascade, scenes: &[PreparedScene]) -> Result<(f64, f64), PipelineError> {
    let (mut e1, mut e2) = (0.0, 0.0);
    for s in scenes {
        let det = tensor::no_grad(|| super::infer::run(net, &s.image))?;
        let flat1: Vec<f64> = (0..TEETH).flat_map(|p| det.stage1[p]).collect();
        let flat2: Vec<f64> = (0..TEETH).flat_map(|p| det.refined[p]).collect();
        let mse = |v: &[f64]| v.iter().zip(&s.centers).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / v.len() as f64;
        e1 += mse(&flat1);
        e2 += mse(&flat2);
    }
    let n = scenes.len().max(1) as f64;
    Ok((e1 / n, e2 / n))
}

/// Start the running feature means at their values over `scenes`.
fn init_feature_means(net: &mut Cascade, scenes: &[PreparedScene]) -> Result<(), PipelineError> {
    let mut seen = PooledFeatures::default();
    for s in scenes {
        tensor::no_grad(|| -> Result<(), PipelineError> {
            let image = s.tensor();
            let s1 = stage1_forward(net, &image)?;
            let estimate = PointSet32::from_flat(s1.centers.data()).expect("64 outputs");
            for p in crop_pooled_patches(net, &image, &s1.features, &estimate)? {
                seen.stage2.push(stage2_forward_pooled(net, &p)?.pooled.data().to_vec());
            }
            seen.stage1.push(s1.pooled.data().to_vec());
            Ok(())
        })?;
    }
    net.track_feature_means(&seen.stage1, &seen.stage2, 1.0);
    Ok(())
}

fn mean_targets(scenes: &[PreparedScene]) -> (Vec<f64>, [f64; 2]) {
    let n = scenes.len() as f64;
    let mut centers = vec![0.0; 2 * TEETH];
    let mut size = [0.0; 2];
    for s in scenes {
        centers.iter_mut().zip(&s.centers).for_each(|(a, b)| *a += b / n);
        for wh in s.sizes.chunks_exact(2) {
            size[0] += wh[0] / (n * TEETH as f64);
            size[1] += wh[1] / (n * TEETH as f64);
        }
    }
    (centers, size)
}

/// Single-scene steps over shuffled passes of `train_set`. `on_step` sees
/// every step's breakdown as it happens.
pub fn train(
    net: &mut Cascade,
    train_set: &[PreparedScene],
    val_set: &[PreparedScene],
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainReport, PipelineError> {
    config.validate().map_err(PipelineError::Config)?;
    if train_set.is_empty() {
        return Err(PipelineError::Config("empty training split".into()));
    }
    let started = Instant::now();
    net.config.offset_head = config.use_offset;
    if config.init_from_data {
        let (centers, size) = mean_targets(train_set);
        net.set_center_bias(&centers);
        net.set_size_bias(size);
    }
    init_feature_means(net, &train_set[..train_set.len().min(16)])?;
    for id in net.head_ids() {
        net.params.get_mut(id).lr_scale = config.head_lr_scale;
    }
    let mut optimizer = Optimizer::new(OptimizerConfig { kind: config.optimizer, learning_rate: config.learning_rate });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let period = if config.validate_every == 0 { train_set.len() } else { config.validate_every };
    let mut order: Vec<usize> = Vec::new();
    let mut report = TrainReport::default();
    let mut epoch = 0;
    for step in 0..config.iterations {
        if order.is_empty() {
            order = (0..train_set.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled");
        let outcome = train_step(net, &mut optimizer, &train_set[idx], config, step, config.lr_at(step))?;
        on_step(step, &outcome.breakdown);
        report.history.push((step, outcome.breakdown));
        let last = step + 1 == config.iterations;
        if !val_set.is_empty() && ((step + 1) % period == 0 || last) {
            epoch += 1;
            let (mse1, mse2) = evaluate_centers(net, val_set)?;
            report.validation.push(ValidationRecord { epoch, step: step + 1, mse1, mse2 });
        }
    }
    reset_trainable(net);
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}
