use serde::{Deserialize, Serialize};

use super::{ParamSet, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

/// First-order update rule with per-parameter state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update at the configured learning rate, then clear gradients.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        let lr = self.config.learning_rate;
        self.step_with_lr(params, lr)
    }

    /// One update at an explicit learning rate (for schedules). Every
    /// trainable parameter must hold a gradient.
    pub fn step_with_lr(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.trainable && p.grad().is_none()) {
            return Err(TensorError::MissingGradient(p.name().to_string()));
        }
        if self.moments.len() != params.len() {
            self.moments = params.iter().map(|p| (vec![0.0; p.values().len()], vec![0.0; p.values().len()])).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        for (p, (m, v)) in params.iter_mut().zip(&mut self.moments) {
            if !p.trainable {
                p.zero_grad();
                continue;
            }
            let grad = p.grad().expect("checked above");
            let lr = lr * p.lr_scale;
            let mut values = p.values().to_vec();
            match self.config.kind {
                OptimizerKind::Sgd => {
                    values.iter_mut().zip(&grad).for_each(|(x, g)| *x -= lr * g);
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((x, g), mi), vi) in values.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            p.set_values(values)?;
        }
        Ok(())
    }
}
