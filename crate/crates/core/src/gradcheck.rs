//! Central finite-difference verification of every analytic gradient.
//!
//! Each row builds a scalar from randomly drawn inputs (non-scalar op outputs
//! are contracted with a fixed random weight vector), runs backward, and
//! compares every input-gradient entry against `(f(x+h) - f(x-h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{self, Norm, LossParts, LossWeights};
use crate::data::{CANVAS_H, CANVAS_W};
use crate::geometry::{PointSet32, TEETH};
use crate::pipeline::{
    crop_pooled_patches, stage1_forward, stage2_forward_pooled, BackboneConfig, Cascade, ModelConfig, Stage2Config,
};
use crate::tensor::{self, ParamSet, Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seeds: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    /// Multiplies the analytic DR gradient; anything but 1 is a deliberate
    /// fault.
    pub dr_gradient_scale: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seeds: 20, step: 1e-5, tolerance: 1e-4, floor: 1e-3, dr_gradient_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

type Build<'a> = dyn Fn(&[Tensor], &[Vec<f64>]) -> tensor::Result<Tensor> + 'a;

/// Differentiable inputs plus constants (targets, contraction weights).
struct Case {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    consts: Vec<Vec<f64>>,
}

/// Max relative error of `build` over its inputs at one draw.
fn check_inputs(case: &Case, build: &Build, cfg: &GradcheckConfig) -> tensor::Result<f64> {
    let leaves: Vec<Tensor> = case
        .shapes
        .iter()
        .zip(&case.values)
        .map(|(s, v)| Tensor::leaf(s, v.clone(), true))
        .collect::<tensor::Result<_>>()?;
    let out = build(&leaves, &case.consts)?;
    out.backward()?;
    let eval = |k: usize, i: usize, delta: f64| -> tensor::Result<f64> {
        tensor::no_grad(|| {
            let inputs: Vec<Tensor> = case
                .shapes
                .iter()
                .zip(&case.values)
                .enumerate()
                .map(|(j, (s, v))| {
                    let mut v = v.clone();
                    if j == k {
                        v[i] += delta;
                    }
                    Tensor::new(s, v)
                })
                .collect::<tensor::Result<_>>()?;
            Ok(build(&inputs, &case.consts)?.item())
        })
    };
    let mut worst: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let numeric = (eval(k, i, cfg.step)? - eval(k, i, -cfg.step)?) / (2.0 * cfg.step);
            worst = worst.max(relative_error(a, numeric, cfg.floor));
        }
    }
    Ok(worst)
}

/// `Σ r_i out_i` with `r` fixed by the draw.
fn contract(out: &Tensor, weights: &[f64]) -> tensor::Result<Tensor> {
    Ok(tensor::sum(&tensor::mul_const(out, &weights[..out.len()])?))
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Values at least 0.05 away from 0, so ReLU never crosses its kink within
/// a finite-difference step.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn positive(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.1..1.0)).collect()
}

/// Two arches of 16 points with irregular but non-degenerate spacing.
fn arches(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 * TEETH);
    for arch in 0..2 {
        let mut x = 50.0;
        for _ in 0..16 {
            x += rng.random_range(20.0..40.0);
            v.push(x);
            v.push(200.0 + 150.0 * arch as f64 + rng.random_range(-15.0..15.0));
        }
    }
    v
}

struct OpCase {
    name: &'static str,
    draw: fn(&mut ChaCha8Rng) -> Case,
    build: Box<Build<'static>>,
}

fn case(shapes: &[&[usize]], values: Vec<Vec<f64>>, consts: Vec<Vec<f64>>) -> Case {
    Case { shapes: shapes.iter().map(|s| s.to_vec()).collect(), values, consts }
}

fn op_cases(cfg: &GradcheckConfig) -> Vec<OpCase> {
    let dr_scale = cfg.dr_gradient_scale;
    vec![
        OpCase {
            name: "add",
            draw: |g| case(&[&[2, 3], &[2, 3]], vec![normal(g, 6), normal(g, 6)], vec![normal(g, 6)]),
            build: Box::new(|x, c| contract(&tensor::add(&x[0], &x[1])?, &c[0])),
        },
        OpCase {
            name: "scale",
            draw: |g| case(&[&[5]], vec![normal(g, 5)], vec![normal(g, 5)]),
            build: Box::new(|x, c| contract(&tensor::scale(&x[0], -1.7), &c[0])),
        },
        OpCase {
            name: "mul_const",
            draw: |g| case(&[&[4]], vec![normal(g, 4)], vec![normal(g, 4)]),
            build: Box::new(|x, c| Ok(tensor::sum(&tensor::mul_const(&x[0], &c[0])?))),
        },
        OpCase {
            name: "sum",
            draw: |g| case(&[&[3, 2]], vec![normal(g, 6)], vec![]),
            build: Box::new(|x, _| Ok(tensor::sum(&x[0]))),
        },
        OpCase {
            name: "relu",
            draw: |g| case(&[&[8]], vec![off_kink(g, 8)], vec![normal(g, 8)]),
            build: Box::new(|x, c| contract(&tensor::relu(&x[0]), &c[0])),
        },
        OpCase {
            name: "reshape",
            draw: |g| case(&[&[2, 3]], vec![normal(g, 6)], vec![normal(g, 6)]),
            build: Box::new(|x, c| contract(&x[0].reshape(&[3, 2])?, &c[0])),
        },
        OpCase {
            name: "global_avg_pool",
            draw: |g| case(&[&[2, 3, 4]], vec![normal(g, 24)], vec![normal(g, 2)]),
            build: Box::new(|x, c| contract(&tensor::global_avg_pool(&x[0])?, &c[0])),
        },
        OpCase {
            name: "centroid_pool",
            draw: |g| {
                let grid: Vec<f64> = (0..24).map(|_| g.random_range(-1.0..1.0)).collect();
                case(&[&[2, 3, 4]], vec![positive(g, 24)], vec![normal(g, 6), grid])
            },
            build: Box::new(|x, c| {
                let grid = Tensor::new(&[2, 3, 4], c[1].clone())?;
                contract(&tensor::centroid_pool(&x[0], &grid, 1e-3)?, &c[0])
            }),
        },
        OpCase {
            name: "fully_connected",
            draw: |g| case(&[&[4], &[3, 4], &[3]], vec![normal(g, 4), normal(g, 12), normal(g, 3)], vec![normal(g, 3)]),
            build: Box::new(|x, c| contract(&tensor::fully_connected(&x[0], &x[1], &x[2])?, &c[0])),
        },
        OpCase {
            name: "conv2d stride 1",
            draw: |g| case(&[&[2, 5, 5], &[3, 2, 3, 3], &[3]], vec![normal(g, 50), normal(g, 54), normal(g, 3)], vec![normal(g, 75)]),
            build: Box::new(|x, c| contract(&tensor::conv2d(&x[0], &x[1], &x[2], 1, 1)?, &c[0])),
        },
        OpCase {
            name: "conv2d stride 2",
            draw: |g| case(&[&[2, 6, 5], &[2, 2, 3, 3], &[2]], vec![normal(g, 60), normal(g, 36), normal(g, 2)], vec![normal(g, 18)]),
            build: Box::new(|x, c| contract(&tensor::conv2d(&x[0], &x[1], &x[2], 2, 1)?, &c[0])),
        },
        OpCase {
            name: "avg_pool2d",
            draw: |g| case(&[&[2, 4, 6]], vec![normal(g, 48)], vec![normal(g, 12)]),
            build: Box::new(|x, c| contract(&tensor::avg_pool2d(&x[0], 2)?, &c[0])),
        },
        OpCase {
            name: "upsample_bilinear",
            draw: |g| case(&[&[2, 3, 4]], vec![normal(g, 24)], vec![normal(g, 126)]),
            build: Box::new(|x, c| contract(&tensor::upsample_bilinear(&x[0], 7, 9)?, &c[0])),
        },
        OpCase {
            name: "upsample_bilinear_window",
            draw: |g| case(&[&[1, 3, 4]], vec![normal(g, 12)], vec![normal(g, 30)]),
            build: Box::new(|x, c| contract(&tensor::upsample_bilinear_window(&x[0], 12, 16, -2, 9, 5, 6)?, &c[0])),
        },
        OpCase {
            name: "upsample_bilinear_window_pooled",
            draw: |g| case(&[&[2, 3, 4]], vec![normal(g, 24)], vec![normal(g, 12)]),
            build: Box::new(|x, c| contract(&tensor::upsample_bilinear_window_pooled(&x[0], 12, 16, 3, -1, 4, 6, 2)?, &c[0])),
        },
        OpCase {
            name: "crop_window",
            draw: |g| case(&[&[2, 4, 5]], vec![normal(g, 40)], vec![normal(g, 24)]),
            build: Box::new(|x, c| contract(&tensor::crop_window(&x[0], -1, 2, 3, 4)?, &c[0])),
        },
        OpCase {
            name: "crop_window_pooled",
            draw: |g| case(&[&[2, 5, 5]], vec![normal(g, 50)], vec![normal(g, 8)]),
            build: Box::new(|x, c| contract(&tensor::crop_window_pooled(&x[0], 2, -2, 4, 4, 2)?, &c[0])),
        },
        OpCase {
            name: "concat_channels",
            draw: |g| case(&[&[1, 2, 3], &[2, 2, 3]], vec![normal(g, 6), normal(g, 12)], vec![normal(g, 18)]),
            build: Box::new(|x, c| contract(&tensor::concat_channels(&x[0], &x[1])?, &c[0])),
        },
        OpCase {
            name: "concat",
            draw: |g| case(&[&[2], &[3]], vec![normal(g, 2), normal(g, 3)], vec![normal(g, 5)]),
            build: Box::new(|x, c| contract(&tensor::concat(&[&x[0], &x[1]]), &c[0])),
        },
        OpCase {
            name: "mse",
            draw: |g| case(&[&[6]], vec![normal(g, 6)], vec![normal(g, 6)]),
            build: Box::new(|x, c| tensor::mse(&x[0], &c[0])),
        },
        OpCase {
            name: "sum_squares",
            draw: |g| case(&[&[3], &[2, 2]], vec![normal(g, 3), normal(g, 4)], vec![]),
            build: Box::new(|x, _| Ok(tensor::sum_squares(&[&x[0], &x[1]]))),
        },
        OpCase {
            name: "l2_norm",
            draw: |g| case(&[&[3], &[2, 2]], vec![normal(g, 3), normal(g, 4)], vec![]),
            build: Box::new(|x, _| Ok(tensor::l2_norm(&[&x[0], &x[1]]))),
        },
        OpCase {
            name: "weighted_sum",
            draw: |g| case(&[&[1], &[1], &[1]], vec![normal(g, 1), normal(g, 1), normal(g, 1)], vec![]),
            build: Box::new(|x, _| tensor::weighted_sum(&[(0.3, &x[0]), (-2.0, &x[1]), (1.5, &x[2])])),
        },
        OpCase {
            name: "center_loss",
            draw: |g| case(&[&[64]], vec![arches(g)], vec![arches(g)]),
            build: Box::new(|x, c| losses::center_loss(&x[0], &c[0])),
        },
        OpCase {
            name: "offset_loss",
            draw: |g| case(&[&[64]], vec![normal(g, 64)], vec![normal(g, 64)]),
            build: Box::new(|x, c| losses::offset_loss(&x[0], &c[0])),
        },
        OpCase {
            name: "box_loss",
            draw: |g| case(&[&[64]], vec![positive(g, 64)], vec![positive(g, 64)]),
            build: Box::new(|x, c| losses::box_loss(&x[0], &c[0])),
        },
        OpCase {
            name: "dr_loss squared",
            draw: |g| case(&[&[64]], vec![arches(g)], vec![]),
            build: Box::new(move |x, _| Ok(losses::dr_loss_scaled(&x[0], Norm::Squared, dr_scale)?.loss)),
        },
        OpCase {
            name: "dr_loss plain",
            draw: |g| case(&[&[64]], vec![arches(g)], vec![]),
            build: Box::new(move |x, _| Ok(losses::dr_loss_scaled(&x[0], Norm::Plain, dr_scale)?.loss)),
        },
    ]
}

/// Max error of `objective` over up to `limit` random entries of every
/// trainable parameter of `holder`. Entries are perturbed in place and
/// restored.
fn check_params<T>(
    holder: &mut T,
    params: fn(&mut T) -> &mut ParamSet,
    objective: &dyn Fn(&T) -> tensor::Result<Tensor>,
    cfg: &GradcheckConfig,
    limit: usize,
    rng: &mut ChaCha8Rng,
) -> tensor::Result<f64> {
    params(holder).zero_grad();
    objective(holder)?.backward()?;
    let set = params(holder);
    let names: Vec<String> = set.iter().filter(|p| p.trainable).map(|p| p.name().to_string()).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let id = params(holder).id_of(&name).expect("registered");
        let base = params(holder).get(id).values().to_vec();
        let grad = params(holder).get(id).grad().unwrap_or_else(|| vec![0.0; base.len()]);
        let n = base.len();
        let picks: Vec<usize> = if n <= limit { (0..n).collect() } else { (0..limit).map(|_| rng.random_range(0..n)).collect() };
        for i in picks {
            let mut at = |delta: f64| -> tensor::Result<f64> {
                let mut v = base.clone();
                v[i] += delta;
                params(holder).get_mut(id).set_values(v)?;
                tensor::no_grad(|| objective(holder).map(|t| t.item()))
            };
            let numeric = (at(cfg.step)? - at(-cfg.step)?) / (2.0 * cfg.step);
            params(holder).get_mut(id).set_values(base.clone())?;
            worst = worst.max(relative_error(grad[i], numeric, cfg.floor));
        }
    }
    Ok(worst)
}

fn total_loss_row(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig, weight_norm: Norm) -> tensor::Result<f64> {
    let n = 2 * TEETH;
    let mut params = ParamSet::new();
    params.register(Parameter::new("w", &[n, 3], normal(rng, 3 * n))?)?;
    let mut bias = Parameter::new("b", &[n], normal(rng, n))?;
    bias.decay = false;
    params.register(bias)?;
    let x = Tensor::new(&[3], normal(rng, 3))?;
    let layout = Tensor::new(&[n], arches(rng))?;
    let targets: Vec<Vec<f64>> = (0..3).map(|_| normal(rng, n)).collect();
    let weights = LossWeights { alpha: 0.7, beta: 1.3, gamma: 0.1, weight_norm };
    let objective = |p: &ParamSet| -> tensor::Result<Tensor> {
        let w = p.tensor(p.id_of("w").expect("w"));
        let b = p.tensor(p.id_of("b").expect("b"));
        let y = tensor::fully_connected(&x, w, b)?;
        let points = tensor::add(&tensor::scale(&y, 3.0), &layout)?;
        let parts = LossParts {
            center: Some(losses::center_loss(&y, &targets[0])?),
            dr: Some(losses::dr_loss_scaled(&points, Norm::Squared, cfg.dr_gradient_scale)?.loss),
            offset: Some(losses::offset_loss(&tensor::scale(&y, 0.5), &targets[1])?),
            box_size: Some(losses::box_loss(&tensor::scale(&y, 2.0), &targets[2])?),
        };
        Ok(losses::total_loss(&parts, p, &weights)?.0)
    };
    check_params(&mut params, |p| p, &objective, cfg, 24, rng)
}

/// Offset loss of a tiny cascade with respect to its stage-2 parameters, on
/// patches cut at a fixed stage-1 estimate. ReLU kinks are covered by their
/// own row.
fn cascade_offset_row(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> tensor::Result<f64> {
    let model = ModelConfig { backbone: BackboneConfig::tiny(), stage2: Stage2Config::tiny(), clahe: None, offset_head: true };
    let mut net = Cascade::new(model, rng.random());
    // heads start at zero, which would hide everything upstream of them
    for id in net.head_ids() {
        let n = net.params.get(id).values().len();
        net.params.get_mut(id).set_values(normal(rng, n).iter().map(|v| 0.1 * v).collect())?;
    }
    // lift every stage-2 pre-activation far above the ReLU kink, which a
    // finite-difference step could otherwise straddle
    for p in net.params.iter_mut().filter(|p| p.name().starts_with("stage2.block") && p.name().ends_with(".bias")) {
        let n = p.values().len();
        p.set_values(vec![4.0; n])?;
    }
    let image = Tensor::new(&[1, CANVAS_H as usize, CANVAS_W as usize], positive(rng, (CANVAS_H * CANVAS_W) as usize))?;
    let estimate = PointSet32::from_flat(&arches(rng)).expect("64 values");
    let patches = tensor::no_grad(|| -> tensor::Result<_> {
        let s1 = stage1_forward(&net, &image)?;
        crop_pooled_patches(&net, &image, &s1.features, &estimate)
    })?;
    let target = normal(rng, 2 * TEETH);
    let trainable: Vec<_> = net.stage2_ids().into_iter().chain(net.offset_head_ids()).collect();
    for p in net.params.iter_mut() {
        p.trainable = false;
    }
    for id in trainable {
        net.params.get_mut(id).trainable = true;
    }
    let objective = |n: &Cascade| -> tensor::Result<Tensor> {
        let offsets =
            patches.iter().map(|p| stage2_forward_pooled(n, p).map(|o| o.offset)).collect::<tensor::Result<Vec<_>>>()?;
        losses::offset_loss(&tensor::concat(&offsets.iter().collect::<Vec<_>>()), &target)
    };
    check_params(&mut net, |n| &mut n.params, &objective, cfg, 4, rng)
}

/// Every row at `cfg.seeds` draws starting from `seed`.
pub fn run(seed: u64, cfg: &GradcheckConfig) -> tensor::Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    let finish = |name: &str, worst: f64| CheckRow {
        name: name.to_string(),
        seeds: cfg.seeds,
        max_rel_error: worst,
        passed: worst <= cfg.tolerance,
    };
    for (k, op) in op_cases(cfg).into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for s in 0..cfg.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((k * 1000 + s) as u64);
            worst = worst.max(check_inputs(&(op.draw)(&mut rng), &*op.build, cfg)?);
        }
        rows.push(finish(op.name, worst));
    }
    type Row = fn(&mut ChaCha8Rng, &GradcheckConfig) -> tensor::Result<f64>;
    let param_rows: [(&str, Row); 3] = [
        ("total_loss (plain weight norm)", |r, c| total_loss_row(r, c, Norm::Plain)),
        ("total_loss (squared weight norm)", |r, c| total_loss_row(r, c, Norm::Squared)),
        ("stage-2 offset objective", cascade_offset_row),
    ];
    for (k, (name, row)) in param_rows.into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for s in 0..cfg.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((100_000 + k * 1000 + s) as u64);
            worst = worst.max(row(&mut rng, cfg)?);
        }
        rows.push(finish(name, worst));
    }
    Ok(rows)
}

/// Fixed-width table, one row per check.
pub fn format_table(rows: &[CheckRow]) -> String {
    let mut out = format!("{:<34} {:>6} {:>12}  result\n", "check", "seeds", "max rel err");
    for r in rows {
        out += &format!(
            "{:<34} {:>6} {:>12.3e}  {}\n",
            r.name,
            r.seeds,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    out
}
