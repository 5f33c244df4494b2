//! AdamW with decoupled weight decay, and the warmup + cosine LR schedule.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Hyperparameters for [`AdamW`].
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter optimizer state: first and second moment estimates plus the
/// shared step count used for bias correction.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW over an ordered set of parameters. Moments are kept in `f64`
/// regardless of the parameter element type so long runs do not accumulate
/// single-precision drift in the running averages.
pub struct AdamW {
    config: AdamWConfig,
    /// Number of optimizer steps taken; bias correction uses `t = steps`.
    steps: u64,
    moments: Vec<MomentState>,
}

impl AdamW {
    /// Creates zeroed state for `param_sizes.len()` parameters.
    pub fn new(config: AdamWConfig, param_sizes: &[usize]) -> Self {
        AdamW {
            config,
            steps: 0,
            moments: param_sizes
                .iter()
                .map(|&n| MomentState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }

    pub fn config(&self) -> AdamWConfig {
        self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one optimizer step to `params` using their accumulated
    /// gradients. Gradients are left intact — the caller clears them.
    ///
    /// Update per element, with `t` the 1-based step count:
    /// `θ ← θ − lr·wd·θ` (decoupled decay, applied first), then
    /// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
    /// `θ ← θ − lr·m̂/(√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
    pub fn step<E: Scalar>(&mut self, params: &[Tensor<E>], lr: f64) -> Result<()> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {lr}"
            )));
        }
        if params.len() != self.moments.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);

        for (param, state) in params.iter().zip(self.moments.iter_mut()) {
            if param.numel() != state.m.len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    details: format!(
                        "moment buffers hold {} elements, parameter has {}",
                        state.m.len(),
                        param.numel()
                    ),
                });
            }
            let grad = param.grad().ok_or_else(|| {
                Error::InvalidArgument(
                    "adamw step on a parameter with no accumulated gradient".into(),
                )
            })?;
            param.with_data_mut(|data| {
                for i in 0..data.len() {
                    let g = grad[i].to_f64_lossy();
                    let mut theta = data[i].to_f64_lossy();
                    theta -= lr * c.weight_decay * theta;
                    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
                    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
                    let m_hat = state.m[i] / bias1;
                    let v_hat = state.v[i] / bias2;
                    theta -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
                    data[i] = E::from_f64_lossy(theta);
                }
            });
        }
        Ok(())
    }

    /// Read access to the moment buffers, for checkpointing.
    pub fn moments(&self) -> &[MomentState] {
        &self.moments
    }

    /// Restores previously checkpointed state.
    pub fn restore(&mut self, steps: u64, moments: Vec<MomentState>) -> Result<()> {
        if moments.len() != self.moments.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} moment buffers, optimizer wants {}",
                moments.len(),
                self.moments.len()
            )));
        }
        for (new, old) in moments.iter().zip(&self.moments) {
            if new.m.len() != old.m.len() || new.v.len() != old.v.len() {
                return Err(Error::InvalidArgument(
                    "checkpointed moment buffer sizes disagree with parameters".into(),
                ));
            }
        }
        self.steps = steps;
        self.moments = moments;
        Ok(())
    }
}

/// Linear-warmup + cosine-decay learning-rate schedule.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, total_steps: usize, warmup_fraction: f64) -> Result<Self> {
        if peak_lr <= 0.0 || !peak_lr.is_finite() {
            return Err(Error::InvalidArgument(format!("peak_lr must be positive, got {peak_lr}")));
        }
        if total_steps == 0 {
            return Err(Error::InvalidArgument("total_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&warmup_fraction) {
            return Err(Error::InvalidArgument(format!(
                "warmup_fraction must be in [0, 1), got {warmup_fraction}"
            )));
        }
        Ok(LrSchedule {
            peak_lr,
            total_steps,
            warmup_fraction,
        })
    }

    /// Learning rate at an optimizer step in `[0, total_steps]`: a linear
    /// ramp `0 → peak` over the first `warmup_fraction·total_steps` steps,
    /// then cosine decay `peak → 0` over the remainder.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "step {step} outside schedule domain [0, {}]",
                self.total_steps
            )));
        }
        let warmup_steps = self.warmup_fraction * self.total_steps as f64;
        let s = step as f64;
        if s < warmup_steps {
            return Ok(self.peak_lr * s / warmup_steps);
        }
        let span = self.total_steps as f64 - warmup_steps;
        if span <= 0.0 {
            return Ok(self.peak_lr);
        }
        let progress = (s - warmup_steps) / span;
        Ok(0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
