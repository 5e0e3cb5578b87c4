use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{decode_scale, BackboneConfig, ModelConfig, PATCH, PATCH_HALF};
use crate::data::{CANVAS_H, CANVAS_W};
use crate::geometry::{PointSet32, TEETH};
use crate::tensor::{self, ParamId, ParamSet, Parameter, Result, Tensor};

#[derive(Debug, Clone, Copy)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
}

/// Both networks and their parameters.
#[derive(Debug, Clone)]
pub struct Cascade {
    pub config: ModelConfig,
    pub params: ParamSet,
    stage1: Vec<Layer>,
    center_head: Layer,
    stage2: Vec<Layer>,
    offset_head: Layer,
    size_head: Layer,
    /// Running means of the pooled features entering each stage's heads;
    /// not trainable.
    mean1: ParamId,
    mean2: ParamId,
    /// Coordinate channels at the input resolution of every block, then at
    /// the final resolution.
    coords1: Vec<Tensor>,
    coords2: Vec<Tensor>,
}

/// `[2, h, w]` constant grid of x and y in `[-1, 1]` at cell centres.
fn coordinate_channels(h: usize, w: usize) -> Tensor {
    let mut v = Vec::with_capacity(2 * h * w);
    for _ in 0..h {
        v.extend((0..w).map(|x| (x as f64 + 0.5) / w as f64 * 2.0 - 1.0));
    }
    for y in 0..h {
        v.extend(std::iter::repeat_n((y as f64 + 0.5) / h as f64 * 2.0 - 1.0, w));
    }
    Tensor::new(&[2, h, w], v).expect("sized")
}

struct Builder {
    params: ParamSet,
    rng: ChaCha8Rng,
}

impl Builder {
    fn layer(&mut self, name: &str, shape: &[usize], std: f64, stride: usize) -> Result<Layer> {
        let n: usize = shape.iter().product();
        let values = if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| normal.sample(&mut self.rng)).collect()
        } else {
            vec![0.0; n]
        };
        let weight = self.params.register(Parameter::new(format!("{name}.weight"), shape, values)?)?;
        let mut bias = Parameter::new(format!("{name}.bias"), &[shape[0]], vec![0.0; shape[0]])?;
        bias.decay = false;
        let bias = self.params.register(bias)?;
        Ok(Layer { weight, bias, stride })
    }

    fn constant(&mut self, name: &str, n: usize) -> Result<ParamId> {
        let mut p = Parameter::new(name, &[n], vec![0.0; n])?;
        p.trainable = false;
        p.decay = false;
        self.params.register(p)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Layer> {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        self.layer(name, &[cout, cin, 3, 3], std, stride)
    }
}

impl Cascade {
    /// Fresh, randomly initialised networks.
    ///
    /// # Panics
    /// If `config` does not validate.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        config.validate().expect("model config must validate before building");
        let mut b = Builder { params: ParamSet::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        let bb = &config.backbone;
        let mut cin = 1;
        let mut stage1 = Vec::new();
        let mut coords1 = Vec::new();
        let (mut h, mut w) = (CANVAS_H as usize / bb.input_pool, CANVAS_W as usize / bb.input_pool);
        for (i, &c) in bb.channels.iter().enumerate() {
            let stride = BackboneConfig::stride(i);
            stage1.push(b.conv(&format!("stage1.block{i}"), cin + 2, c, stride).expect("unique names"));
            coords1.push(coordinate_channels(h, w));
            (h, w) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
            cin = c;
        }
        coords1.push(coordinate_channels(h, w));
        let feat = bb.feature_channels();
        // heads start at zero weight: outputs begin at their (mean) biases
        let center_head = b.layer("stage1.head", &[2 * TEETH, MOMENTS * feat], 0.0, 1).expect("unique");

        let s2 = &config.stage2;
        let mut cin = feat + 1;
        let mut stage2 = Vec::new();
        let mut coords2 = Vec::new();
        let mut side = PATCH / s2.input_pool;
        for (i, (&c, &s)) in s2.channels.iter().zip(&s2.strides).enumerate() {
            stage2.push(b.conv(&format!("stage2.block{i}"), cin + 2, c, s).expect("unique"));
            coords2.push(coordinate_channels(side, side));
            side = (side - 1) / s + 1;
            cin = c;
        }
        coords2.push(coordinate_channels(side, side));
        let offset_head = b.layer("stage2.offset", &[2, MOMENTS * cin], 0.0, 1).expect("unique");
        let size_head = b.layer("stage2.size", &[2, MOMENTS * cin], 0.0, 1).expect("unique");
        let mean1 = b.constant("stage1.head.feature_mean", MOMENTS * feat).expect("unique");
        let mean2 = b.constant("stage2.head.feature_mean", MOMENTS * cin).expect("unique");

        let mut cascade = Self {
            coords1,
            coords2,
            config,
            params: b.params,
            stage1,
            center_head,
            stage2,
            offset_head,
            size_head,
            mean1,
            mean2,
        };
        // canvas middle and a mid-sized tooth until training sets data means
        cascade.set_center_bias(&[0.5 * f64::from(CANVAS_W), 0.5 * f64::from(CANVAS_H)].repeat(TEETH));
        cascade.set_size_bias([40.0, 90.0]);
        cascade
    }

    /// Set the center head bias; with zero head weights the net then outputs
    /// exactly `centers`.
    pub fn set_center_bias(&mut self, centers: &[f64]) {
        let [sx, sy] = decode_scale();
        let v = centers.iter().enumerate().map(|(i, c)| c / if i % 2 == 0 { sx } else { sy }).collect();
        self.params.get_mut(self.center_head.bias).set_values(v).expect("64 values");
    }

    pub fn set_size_bias(&mut self, size: [f64; 2]) {
        let [sx, sy] = decode_scale();
        self.params.get_mut(self.size_head.bias).set_values(vec![size[0] / sx, size[1] / sy]).expect("2 values");
    }

    /// Zero the weights of the three heads; outputs then equal their biases.
    pub fn zero_head_weights(&mut self) {
        for head in [self.center_head, self.offset_head, self.size_head] {
            let p = self.params.get_mut(head.weight);
            let n = p.values().len();
            p.set_values(vec![0.0; n]).expect("same size");
        }
    }

    pub fn offset_head_ids(&self) -> [ParamId; 2] {
        [self.offset_head.weight, self.offset_head.bias]
    }

    pub fn center_head_ids(&self) -> [ParamId; 2] {
        [self.center_head.weight, self.center_head.bias]
    }

    pub fn size_head_ids(&self) -> [ParamId; 2] {
        [self.size_head.weight, self.size_head.bias]
    }

    /// The non-trainable feature means.
    pub fn feature_mean_ids(&self) -> [ParamId; 2] {
        [self.mean1, self.mean2]
    }

    /// Move the feature means towards the average of the observed
    /// `(stage1, stage2)` pooled features by `rate` (1 replaces them),
    /// shifting the head biases so every output stays where it was.
    pub fn track_feature_means(&mut self, stage1: &[Vec<f64>], stage2: &[Vec<f64>], rate: f64) {
        let heads = [(self.mean1, vec![self.center_head], stage1), (self.mean2, vec![self.offset_head, self.size_head], stage2)];
        for (id, layers, samples) in heads {
            if samples.is_empty() {
                continue;
            }
            let old = self.params.get(id).values().to_vec();
            let n = old.len();
            let k = samples.len() as f64;
            let new: Vec<f64> =
                (0..n).map(|c| old[c] + rate * (samples.iter().map(|s| s[c]).sum::<f64>() / k - old[c])).collect();
            for l in layers {
                let w = self.params.get(l.weight).values();
                let b: Vec<f64> = self
                    .params
                    .get(l.bias)
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(r, b)| b + (0..n).map(|c| w[r * n + c] * (new[c] - old[c])).sum::<f64>())
                    .collect();
                self.params.get_mut(l.bias).set_values(b).expect("same size");
            }
            self.params.get_mut(id).set_values(new).expect("same size");
        }
    }

    /// Every stage-2 parameter.
    pub fn stage2_ids(&self) -> Vec<ParamId> {
        self.stage2
            .iter()
            .chain([&self.offset_head, &self.size_head])
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// Head weights and biases of both stages.
    pub fn head_ids(&self) -> Vec<ParamId> {
        [self.center_head, self.offset_head, self.size_head].iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Coordinate channels, 3x3 conv, ReLU.
    fn conv_block(&self, x: &Tensor, l: &Layer, coords: &Tensor) -> Result<Tensor> {
        let x = tensor::concat_channels(x, coords)?;
        let y = tensor::conv2d(&x, self.params.tensor(l.weight), self.params.tensor(l.bias), l.stride, 1)?;
        Ok(tensor::relu(&y))
    }

    /// FC head on mean-centred features: `W (x - m) + b`.
    fn dense(&self, x: &Tensor, l: &Layer, mean: ParamId) -> Result<Tensor> {
        let m = self.params.get(mean).values();
        let centred = tensor::add(x, &Tensor::new(&[m.len()], m.iter().map(|v| -v).collect())?)?;
        tensor::fully_connected(&centred, self.params.tensor(l.weight), self.params.tensor(l.bias))
    }
}

/// Head inputs per feature channel: its mean and its two centroid
/// coordinates.
const MOMENTS: usize = 3;

/// Keeps the centroid of a silent channel finite.
const CENTROID_EPS: f64 = 1e-3;

pub struct Stage1Output {
    /// Pixel coordinates, flattened point order.
    pub centers: Tensor,
    /// Last backbone map.
    pub features: Tensor,
    /// Per-channel mean and centroid of the last map: the head input.
    pub pooled: Tensor,
}

/// `image` is `[1, 512, 768]` with intensities in `[0, 1]`.
pub fn stage1_forward(net: &Cascade, image: &Tensor) -> Result<Stage1Output> {
    let pool = net.config.backbone.input_pool;
    let mut x = if pool > 1 { tensor::avg_pool2d(image, pool)? } else { image.clone() };
    for (l, c) in net.stage1.iter().zip(&net.coords1) {
        x = net.conv_block(&x, l, c)?;
    }
    let pooled = tensor::centroid_pool(&x, net.coords1.last().expect("final grid"), CENTROID_EPS)?;
    let head = net.dense(&pooled, &net.center_head, net.mean1)?;
    let centers = tensor::mul_const(&head, &decode_scale().repeat(TEETH))?;
    Ok(Stage1Output { centers, features: x, pooled })
}

/// Top-left corner of the patch around a center; coordinates round half away
/// from zero.
pub fn patch_origin(cx: f64, cy: f64) -> (i64, i64) {
    let half = PATCH as i64 / 2;
    (cx.round() as i64 - half, cy.round() as i64 - half)
}

/// One `[C+1, 128, 128]` window per tooth (flattened point order) over the
/// image stacked on the canvas-resolution features. Windows past the border
/// read zeros. Crop positions are plain numbers, outside the graph.
pub fn crop_patches(image: &Tensor, features: &Tensor, centers: &PointSet32) -> Result<Vec<Tensor>> {
    let (h, w) = (CANVAS_H as usize, CANVAS_W as usize);
    centers
        .iter()
        .map(|p| {
            let (x0, y0) = patch_origin(p.x, p.y);
            let img = tensor::crop_window(image, y0, x0, PATCH, PATCH)?;
            let feat = tensor::upsample_bilinear_window(features, h, w, y0, x0, PATCH, PATCH)?;
            tensor::concat_channels(&img, &feat)
        })
        .collect()
}

/// [`crop_patches`] followed by the stage-2 input pooling, computed directly
/// at pooled resolution. This is what training and inference feed stage 2.
pub fn crop_pooled_patches(net: &Cascade, image: &Tensor, features: &Tensor, centers: &PointSet32) -> Result<Vec<Tensor>> {
    let (h, w) = (CANVAS_H as usize, CANVAS_W as usize);
    let k = net.config.stage2.input_pool;
    centers
        .iter()
        .map(|p| {
            let (x0, y0) = patch_origin(p.x, p.y);
            let img = tensor::crop_window_pooled(image, y0, x0, PATCH, PATCH, k)?;
            let feat = tensor::upsample_bilinear_window_pooled(features, h, w, y0, x0, PATCH, PATCH, k)?;
            tensor::concat_channels(&img, &feat)
        })
        .collect()
}

pub struct Stage2Output {
    /// Pixels, relative to the patch center.
    pub offset: Tensor,
    /// `(w, h)` in pixels.
    pub size: Tensor,
    pub pooled: Tensor,
}

/// Stage 2 on a full-resolution `[C+1, 128, 128]` patch.
pub fn stage2_forward(net: &Cascade, patch: &Tensor) -> Result<Stage2Output> {
    let pool = net.config.stage2.input_pool;
    let x = if pool > 1 { tensor::avg_pool2d(patch, pool)? } else { patch.clone() };
    stage2_forward_pooled(net, &x)
}

/// Stage 2 on a patch that has already been pooled.
pub fn stage2_forward_pooled(net: &Cascade, pooled: &Tensor) -> Result<Stage2Output> {
    let mut x = pooled.clone();
    for (l, c) in net.stage2.iter().zip(&net.coords2) {
        x = net.conv_block(&x, l, c)?;
    }
    let g = tensor::centroid_pool(&x, net.coords2.last().expect("final grid"), CENTROID_EPS)?;
    let offset = tensor::scale(&net.dense(&g, &net.offset_head, net.mean2)?, PATCH_HALF);
    let size = tensor::mul_const(&net.dense(&g, &net.size_head, net.mean2)?, &decode_scale())?;
    Ok(Stage2Output { offset, size, pooled: g })
}
