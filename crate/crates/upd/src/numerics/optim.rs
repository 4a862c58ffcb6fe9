//! AdamW with a cosine-to-zero learning-rate schedule.
//!
//! Weight decay is decoupled and scaled by the scheduled learning rate, so a
//! step at lr = 0 is an exact identity on the parameters no matter what the
//! gradients contain. Gradient clipping, when enabled, rescales the global
//! norm before the moment updates see anything.

use std::collections::BTreeMap;

use crate::error::{Result, UpdError};
use crate::numerics::matrix::DenseMatrix;

/// Trainable parameters keyed by stable names; ordering is the map order, so
/// every walk over them is deterministic.
pub type Params = BTreeMap<String, DenseMatrix>;

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant {
        base: f64,
    },
    /// Cosine decay from `base` at the first step to exactly zero at the
    /// last, with an optional linear warmup over the leading fraction.
    CosineToZero {
        base: f64,
        total_steps: usize,
        warmup_frac: f64,
    },
}

impl LrSchedule {
    pub fn cosine(base: f64, total_steps: usize) -> Self {
        LrSchedule::CosineToZero {
            base,
            total_steps,
            warmup_frac: 0.0,
        }
    }

    /// Learning rate for the zero-based step index.
    pub fn lr(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant { base } => base,
            LrSchedule::CosineToZero {
                base,
                total_steps,
                warmup_frac,
            } => {
                if total_steps == 0 {
                    return 0.0;
                }
                let warmup = (warmup_frac * total_steps as f64).round() as usize;
                if step < warmup {
                    return base * (step + 1) as f64 / warmup as f64;
                }
                if total_steps == 1 {
                    return base;
                }
                let last = total_steps - 1;
                if step >= last {
                    return 0.0;
                }
                let span = last - warmup;
                if span == 0 {
                    return 0.0;
                }
                let progress = (step - warmup) as f64 / span as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Maximum global gradient norm; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn new(schedule: LrSchedule, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        OptimizerConfig {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            clip_norm,
        }
    }
}

/// What a call to [`OptimizerState::step`] actually applied.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor the gradients were scaled by (1.0 when no clipping happened).
    pub clip_factor: f64,
}

#[derive(Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    steps_taken: usize,
    first_moment: BTreeMap<String, DenseMatrix>,
    second_moment: BTreeMap<String, DenseMatrix>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            steps_taken: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.steps_taken
    }

    pub fn next_lr(&self) -> f64 {
        self.config.schedule.lr(self.steps_taken)
    }

    /// One AdamW update over every parameter in `params`. Aborts without
    /// touching anything if any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<StepInfo> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(UpdError::NonFinite {
                    context: "gradient",
                    name: name.clone(),
                });
            }
        }
        for name in params.keys() {
            if !grads.contains_key(name) {
                return Err(UpdError::contract(format!(
                    "no gradient supplied for parameter {name:?}"
                )));
            }
        }

        let grad_norm = {
            let sq: f64 = grads
                .values()
                .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum();
            sq.sqrt()
        };
        let clip_factor = match self.config.clip_norm {
            Some(max) if grad_norm > max && grad_norm > 0.0 => max / grad_norm,
            _ => 1.0,
        };

        let lr = self.config.schedule.lr(self.steps_taken);
        self.steps_taken += 1;
        let t = self.steps_taken as i32;
        let bias1 = 1.0 - self.config.beta1.powi(t);
        let bias2 = 1.0 - self.config.beta2.powi(t);

        for (name, value) in params.iter_mut() {
            let grad = &grads[name];
            if grad.shape() != value.shape() {
                return Err(UpdError::ShapeMismatch {
                    op: "optimizer step",
                    left: value.shape(),
                    right: grad.shape(),
                });
            }
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| DenseMatrix::zeros(value.rows(), value.cols()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| DenseMatrix::zeros(value.rows(), value.cols()));
            let (b1, b2, eps, wd) = (
                self.config.beta1,
                self.config.beta2,
                self.config.epsilon,
                self.config.weight_decay,
            );
            for ((p, g), (m, v)) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .map(|(p, g)| (p, g * clip_factor))
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }

        Ok(StepInfo {
            lr,
            grad_norm,
            clip_factor,
        })
    }
}
