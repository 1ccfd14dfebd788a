//! Diffusion noise schedule and schedule-matched noise injection.
//!
//! Time-steps are indexed `0..T` with `t = 0` the least noisy. The latent is
//! re-noised to the signal-to-noise ratio the denoiser expects at `t`:
//! `sqrt(alpha_bar_t) * z + sqrt(1 - alpha_bar_t) * eps`, with `eps` redrawn
//! on every call.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{LvoError, Result};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

/// Precomputed schedule coefficients for a `T`-step diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerTable {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl SchedulerTable {
    /// Build a table from explicit cumulative coefficients. They must lie in
    /// `(0, 1]` and be strictly decreasing.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<SchedulerTable> {
        if alpha_bar.is_empty() {
            return Err(LvoError::Config("schedule needs at least 1 step".into()));
        }
        for (t, &a) in alpha_bar.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(LvoError::Config(format!(
                    "alpha_bar[{t}] = {a} outside (0, 1]"
                )));
            }
            if t > 0 && a >= alpha_bar[t - 1] {
                return Err(LvoError::Config(format!(
                    "alpha_bar must be strictly decreasing, violated at t = {t}"
                )));
            }
        }
        // Recover per-step alphas from the cumulative product.
        let mut alphas = Vec::with_capacity(alpha_bar.len());
        let mut prev = 1.0;
        for &a in &alpha_bar {
            alphas.push(a / prev);
            prev = a;
        }
        let betas = alphas.iter().map(|a| 1.0 - a).collect();
        Ok(SchedulerTable {
            betas,
            alphas,
            alpha_bar,
        })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(LvoError::Config(format!(
                "time-step {t} out of range for a {}-step schedule",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t])
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alphas[t])
    }

    /// The factor by which gradients scale through [`inject_schedule_noise`].
    pub fn sqrt_alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar(t)?.sqrt())
    }
}

/// Build a schedule with `beta` interpolated linearly over `[1e-4, 0.02]` and
/// `alpha_bar_t` the running product of `1 - beta`.
pub fn build_scheduler(t_total: usize, kind: ScheduleKind) -> Result<SchedulerTable> {
    if t_total < 1 {
        return Err(LvoError::Config("schedule needs at least 1 step".into()));
    }
    let ScheduleKind::Linear = kind;
    let mut alpha_bar = Vec::with_capacity(t_total);
    let mut prod = 1.0;
    for t in 0..t_total {
        let frac = if t_total == 1 {
            0.0
        } else {
            t as f64 / (t_total - 1) as f64
        };
        let beta = BETA_START + (BETA_END - BETA_START) * frac;
        prod *= 1.0 - beta;
        alpha_bar.push(prod);
    }
    SchedulerTable::from_alpha_bar(alpha_bar)
}

/// Noise `z` to time-step `t` with an explicit noise field (used by the
/// optimizer to freeze draws within one step).
pub fn inject_schedule_noise_with(
    z: &Array3<f64>,
    t: usize,
    s: &SchedulerTable,
    eps: &Array3<f64>,
) -> Result<Array3<f64>> {
    let a = s.alpha_bar(t)?;
    if a == 1.0 {
        // Noiseless limit: return z bit-exactly rather than adding 0 * eps.
        return Ok(z.clone());
    }
    if eps.dim() != z.dim() {
        return Err(LvoError::shape(
            format!("{:?}", z.dim()),
            format!("{:?}", eps.dim()),
        ));
    }
    Ok(z * a.sqrt() + eps * (1.0 - a).sqrt())
}

/// Draw a standard-normal field of `z`'s shape from `rng`.
pub fn draw_noise(shape: (usize, usize, usize), rng: &mut impl Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Noise `z` to time-step `t` with a fresh standard-normal draw.
pub fn inject_schedule_noise(
    z: &Array3<f64>,
    t: usize,
    s: &SchedulerTable,
    rng: &mut impl Rng,
) -> Result<Array3<f64>> {
    let eps = draw_noise(z.dim(), rng);
    inject_schedule_noise_with(z, t, s, &eps)
}
