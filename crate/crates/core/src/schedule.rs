//! DDPM noise schedule: forward noising, reverse denoising, classifier-free
//! guidance, and strided sub-schedules for few-step sampling.
//!
//! Schedule tables are kept in `f64` and cast at the point of use, so the
//! cumulative products stay exact regardless of the tensor element type.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-timestep β values and their derived cumulative ᾱ products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `t_diff`
    /// timesteps (both endpoints included).
    pub fn linear(t_diff: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_diff == 0 {
            return Err(Error::InvalidArgument("t_diff must be positive".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = if t_diff == 1 {
            vec![beta_start]
        } else {
            (0..t_diff)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_diff - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas; ᾱ is the running product of
    /// `(1 − β_t)`, computed sequentially.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one beta".into()));
        }
        if let Some(&bad) = betas.iter().find(|&&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "all betas must lie in (0, 1), got {bad}"
            )));
        }
        let mut alphas_cumprod = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alphas_cumprod.push(prod);
        }
        Ok(NoiseSchedule {
            betas,
            alphas_cumprod,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// `ᾱ_t = Π_{s≤t} (1 − β_s)`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_t(&self, t: usize, op: &'static str) -> Result<()> {
        if t >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "{op}: timestep {t} outside schedule of length {}",
                self.len()
            )));
        }
        Ok(())
    }
}

fn check_same_shape<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            details: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// Combines two per-element tensors as `c₀·a + c₁·b` into a fresh leaf.
/// Schedule arithmetic never participates in gradients — the model input is
/// a constant as far as the tape is concerned.
fn lincomb<E: Scalar>(c0: f64, a: &Tensor<E>, c1: f64, b: &Tensor<E>) -> Tensor<E> {
    let c0 = E::from_f64_lossy(c0);
    let c1 = E::from_f64_lossy(c1);
    let data = a.with_data(|ad| {
        b.with_data(|bd| {
            ad.iter()
                .zip(bd)
                .map(|(&x, &y)| c0 * x + c1 * y)
                .collect::<Vec<E>>()
        })
    });
    Tensor::from_vec(a.shape(), data).expect("shapes validated by caller")
}

/// One forward noising step: `x_t = √(1−β_t)·x_{t−1} + √β_t·ε`.
pub fn forward_noise_step<E: Scalar>(
    x_prev: &Tensor<E>,
    t: usize,
    noise: &Tensor<E>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<E>> {
    schedule.check_t(t, "forward_noise_step")?;
    check_same_shape(x_prev, noise, "forward_noise_step")?;
    let b = schedule.beta(t);
    Ok(lincomb((1.0 - b).sqrt(), x_prev, b.sqrt(), noise))
}

/// Closed-form jump to timestep `t`: `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn forward_noise_closed<E: Scalar>(
    x0: &Tensor<E>,
    t: usize,
    noise: &Tensor<E>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<E>> {
    schedule.check_t(t, "forward_noise_closed")?;
    check_same_shape(x0, noise, "forward_noise_closed")?;
    let ab = schedule.alpha_bar(t);
    Ok(lincomb(ab.sqrt(), x0, (1.0 - ab).sqrt(), noise))
}

/// One reverse (denoising) step:
/// `x_{t−1} = (x_t − (β_t/√(1−ᾱ_t))·ε̂)/√(1−β_t) + σ_t·z` with `σ_t = √β_t`.
/// The stochastic term is forced to zero at `t = 0`, so `noise` may be
/// `None` there (and is ignored if supplied).
pub fn ddpm_reverse_step<E: Scalar>(
    x_t: &Tensor<E>,
    eps_hat: &Tensor<E>,
    t: usize,
    noise: Option<&Tensor<E>>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<E>> {
    schedule.check_t(t, "ddpm_reverse_step")?;
    check_same_shape(x_t, eps_hat, "ddpm_reverse_step")?;
    let b = schedule.beta(t);
    let ab = schedule.alpha_bar(t);
    let inv_sqrt_alpha = 1.0 / (1.0 - b).sqrt();
    let eps_coef = b / (1.0 - ab).sqrt();
    let mean = lincomb(inv_sqrt_alpha, x_t, -inv_sqrt_alpha * eps_coef, eps_hat);
    if t == 0 {
        return Ok(mean);
    }
    let noise = noise.ok_or_else(|| {
        Error::InvalidArgument(format!("ddpm_reverse_step at t={t} requires noise"))
    })?;
    check_same_shape(x_t, noise, "ddpm_reverse_step")?;
    Ok(lincomb(1.0, &mean, b.sqrt(), noise))
}

/// Classifier-free guidance: `ε̂ = ε̂_uncond + scale·(ε̂_cond − ε̂_uncond)`.
/// `scale = 0` returns the unconditional branch, `scale = 1` the conditional.
pub fn cfg_combine<E: Scalar>(
    eps_cond: &Tensor<E>,
    eps_uncond: &Tensor<E>,
    scale: f64,
) -> Result<Tensor<E>> {
    if scale < 0.0 || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "guidance scale must be finite and non-negative, got {scale}"
        )));
    }
    check_same_shape(eps_cond, eps_uncond, "cfg_combine")?;
    Ok(lincomb(1.0 - scale, eps_uncond, scale, eps_cond))
}

/// Picks `steps` timesteps evenly spaced over `[0, t_diff)`, ascending.
/// The endpoints are always included: the chain starts at `t_diff − 1` and
/// finishes with a final denoise at `t = 0`.
pub fn strided_timesteps(t_diff: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || t_diff == 0 {
        return Err(Error::InvalidArgument(
            "strided_timesteps needs positive t_diff and steps".into(),
        ));
    }
    if steps > t_diff {
        return Err(Error::InvalidArgument(format!(
            "cannot take {steps} distinct timesteps from a schedule of {t_diff}"
        )));
    }
    if steps == 1 {
        return Ok(vec![t_diff - 1]);
    }
    let mut taus: Vec<usize> = (0..steps)
        .map(|i| ((i as f64) * (t_diff - 1) as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    taus.dedup();
    Ok(taus)
}

/// Derives the effective schedule over a strided subset: the step from
/// `τ_{i−1}` to `τ_i` behaves like a single step with
/// `β'_i = 1 − ᾱ(τ_i)/ᾱ(τ_{i−1})` (and `β'_0 = 1 − ᾱ(τ_0)` taking ᾱ
/// before the chain as 1).
pub fn sub_schedule(schedule: &NoiseSchedule, taus: &[usize]) -> Result<NoiseSchedule> {
    if taus.is_empty() {
        return Err(Error::InvalidArgument("sub_schedule needs at least one timestep".into()));
    }
    if taus.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "sub_schedule timesteps must be strictly ascending".into(),
        ));
    }
    schedule.check_t(*taus.last().expect("non-empty"), "sub_schedule")?;
    let mut betas = Vec::with_capacity(taus.len());
    let mut prev_ab = 1.0;
    for &t in taus {
        let ab = schedule.alpha_bar(t);
        betas.push(1.0 - ab / prev_ab);
        prev_ab = ab;
    }
    NoiseSchedule::from_betas(betas)
}
