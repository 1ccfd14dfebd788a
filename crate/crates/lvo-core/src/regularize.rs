//! Latent-space penalties and their gradients.
//!
//! All penalties are evaluated on the clean latent, before schedule noise or
//! random transforms are applied. Each is differentiable almost everywhere;
//! at kinks the gradient takes the zero subgradient, so `*_grad` functions
//! are total.

use ndarray::Array3;

use crate::error::{LvoError, Result};

/// Absolute values above this are penalized by [`range_penalty`].
pub const RANGE_THRESHOLD: f64 = 3.0;

/// The full regularizer bundle: penalty weights, gradient conditioners, and
/// random-transform magnitudes. A weight of zero (or `spectral_filter =
/// false`) disables the corresponding term entirely.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerWeights {
    pub tv_weight: f64,
    pub range_weight: f64,
    pub moment_weight: f64,
    pub spectral_filter: bool,
    /// Initial Gaussian sigma for gradient smoothing, in latent-pixel units.
    pub smoothing_sigma0: f64,
    pub jitter_px: u32,
    pub rotation_deg: f64,
    /// Scales are drawn from `[1/scale_factor, scale_factor]`; must be >= 1.
    pub scale_factor: f64,
}

impl RegularizerWeights {
    /// Default bundle for raw-channel targets.
    pub fn raw_layer() -> RegularizerWeights {
        RegularizerWeights {
            tv_weight: 0.5,
            range_weight: 0.5,
            moment_weight: 0.0,
            spectral_filter: true,
            smoothing_sigma0: 0.5,
            jitter_px: 1,
            rotation_deg: 5.0,
            scale_factor: 1.1,
        }
    }

    /// Default bundle for SAE-feature targets.
    pub fn sae() -> RegularizerWeights {
        RegularizerWeights {
            tv_weight: 0.0,
            range_weight: 0.5,
            moment_weight: 0.5,
            spectral_filter: true,
            smoothing_sigma0: 0.0,
            jitter_px: 1,
            rotation_deg: 5.0,
            scale_factor: 1.1,
        }
    }

    /// Bundle with every regularizer disabled.
    pub fn disabled() -> RegularizerWeights {
        RegularizerWeights {
            tv_weight: 0.0,
            range_weight: 0.0,
            moment_weight: 0.0,
            spectral_filter: false,
            smoothing_sigma0: 0.0,
            jitter_px: 0,
            rotation_deg: 0.0,
            scale_factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("tv_weight", self.tv_weight),
            ("range_weight", self.range_weight),
            ("moment_weight", self.moment_weight),
            ("smoothing_sigma0", self.smoothing_sigma0),
            ("rotation_deg", self.rotation_deg),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(LvoError::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !self.scale_factor.is_finite() || self.scale_factor < 1.0 {
            return Err(LvoError::Config(format!(
                "scale_factor must be finite and >= 1, got {}",
                self.scale_factor
            )));
        }
        Ok(())
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Anisotropic total variation of a `(C, H, W)` latent.
///
/// Per channel, sums `|z[i+1,j] - z[i,j]|` and `|z[i,j+1] - z[i,j]|` over all
/// in-bounds neighbor pairs (no wrap-around), normalizes by `H * W`, then
/// averages over channels.
pub fn tv_penalty(z: &Array3<f64>) -> f64 {
    let (c, h, w) = z.dim();
    let mut total = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    acc += (z[[ch, i + 1, j]] - z[[ch, i, j]]).abs();
                }
                if j + 1 < w {
                    acc += (z[[ch, i, j + 1]] - z[[ch, i, j]]).abs();
                }
            }
        }
        total += acc / (h * w) as f64;
    }
    total / c as f64
}

pub fn tv_grad(z: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = z.dim();
    let mut g = Array3::zeros((c, h, w));
    let scale = 1.0 / (c * h * w) as f64;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    let s = sign0(z[[ch, i + 1, j]] - z[[ch, i, j]]) * scale;
                    g[[ch, i + 1, j]] += s;
                    g[[ch, i, j]] -= s;
                }
                if j + 1 < w {
                    let s = sign0(z[[ch, i, j + 1]] - z[[ch, i, j]]) * scale;
                    g[[ch, i, j + 1]] += s;
                    g[[ch, i, j]] -= s;
                }
            }
        }
    }
    g
}

/// Mean over all elements of `relu(|z| - 3)^2`. Zero while the latent stays
/// inside `[-3, 3]`.
pub fn range_penalty(z: &Array3<f64>) -> f64 {
    let n = z.len() as f64;
    z.iter()
        .map(|&v| {
            let e = v.abs() - RANGE_THRESHOLD;
            if e > 0.0 {
                e * e
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / n
}

pub fn range_grad(z: &Array3<f64>) -> Array3<f64> {
    let n = z.len() as f64;
    z.map(|&v| {
        let e = v.abs() - RANGE_THRESHOLD;
        if e > 0.0 {
            2.0 * e * sign0(v) / n
        } else {
            0.0
        }
    })
}

/// `|mean(z)| + |std(z) - 1|` with the population standard deviation taken
/// over all elements of all channels jointly. Needs at least 2 elements.
pub fn moment_penalty(z: &Array3<f64>) -> Result<f64> {
    let n = check_moment_len(z)?;
    let mean = z.sum() / n;
    let var = z.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(mean.abs() + (var.sqrt() - 1.0).abs())
}

pub fn moment_grad(z: &Array3<f64>) -> Result<Array3<f64>> {
    let n = check_moment_len(z)?;
    let mean = z.sum() / n;
    let var = z.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let d_mean = sign0(mean) / n;
    let s_std = sign0(std - 1.0);
    Ok(z.map(|&v| {
        // d std / d z_i = (z_i - mean) / (n * std); zero subgradient when the
        // latent is constant and std is exactly 0.
        let d_std = if std > 0.0 { (v - mean) / (n * std) } else { 0.0 };
        d_mean + s_std * d_std
    }))
}

fn check_moment_len(z: &Array3<f64>) -> Result<f64> {
    if z.len() < 2 {
        return Err(LvoError::shape(
            "at least 2 elements for moment penalty",
            z.len(),
        ));
    }
    Ok(z.len() as f64)
}

/// Weighted sum of the three penalties.
pub fn total_penalty(z: &Array3<f64>, w: &RegularizerWeights) -> Result<f64> {
    let mut total = 0.0;
    if w.tv_weight != 0.0 {
        total += w.tv_weight * tv_penalty(z);
    }
    if w.range_weight != 0.0 {
        total += w.range_weight * range_penalty(z);
    }
    if w.moment_weight != 0.0 {
        total += w.moment_weight * moment_penalty(z)?;
    }
    Ok(total)
}

/// Gradient of [`total_penalty`] with respect to the latent.
pub fn total_penalty_grad(z: &Array3<f64>, w: &RegularizerWeights) -> Result<Array3<f64>> {
    let mut g = Array3::zeros(z.dim());
    if w.tv_weight != 0.0 {
        g.scaled_add(w.tv_weight, &tv_grad(z));
    }
    if w.range_weight != 0.0 {
        g.scaled_add(w.range_weight, &range_grad(z));
    }
    if w.moment_weight != 0.0 {
        g.scaled_add(w.moment_weight, &moment_grad(z)?);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use ndarray::Array3;
    use rand_distr::{Distribution, StandardNormal};

    fn random_latent(seed: u64, scale: f64) -> Array3<f64> {
        let mut rng = derive_rng(seed, &["test", "latent"]);
        Array3::from_shape_simple_fn((4, 8, 8), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        })
    }

    fn check_grad(
        f: impl Fn(&Array3<f64>) -> f64,
        g: impl Fn(&Array3<f64>) -> Array3<f64>,
        z: &Array3<f64>,
    ) {
        let grad = g(z);
        let h = 1e-5;
        for idx in [(0, 0, 0), (1, 3, 4), (2, 7, 7), (3, 5, 1), (0, 4, 6)] {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            let err = (fd - grad[idx]).abs();
            assert!(
                err <= 1e-6 * grad[idx].abs().max(1.0),
                "fd {fd} vs grad {} at {idx:?}",
                grad[idx]
            );
        }
    }

    #[test]
    fn tv_worked_example() {
        let z = Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(tv_penalty(&z), 1.5);
    }

    #[test]
    fn tv_constant_is_zero() {
        let z = Array3::from_elem((4, 8, 8), 2.7);
        assert_eq!(tv_penalty(&z), 0.0);
    }

    #[test]
    fn tv_is_sign_symmetric() {
        let z = random_latent(10, 1.0);
        let neg = z.map(|&v| -v);
        assert!((tv_penalty(&z) - tv_penalty(&neg)).abs() < 1e-15);
    }

    #[test]
    fn range_worked_example() {
        let z = Array3::from_elem((2, 3, 3), 4.0);
        assert_eq!(range_penalty(&z), 1.0);
        let z = Array3::from_elem((1, 2, 2), -5.0);
        assert_eq!(range_penalty(&z), 4.0);
    }

    #[test]
    fn range_inside_threshold_is_zero() {
        let z = Array3::from_shape_vec((1, 1, 4), vec![-3.0, -1.0, 0.5, 3.0]).unwrap();
        assert_eq!(range_penalty(&z), 0.0);
        assert!(range_grad(&z).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn moment_worked_example() {
        let z = Array3::from_shape_vec((1, 1, 2), vec![-2.0, 2.0]).unwrap();
        assert_eq!(moment_penalty(&z).unwrap(), 1.0);
        let c = Array3::from_elem((1, 1, 3), -1.5);
        assert_eq!(moment_penalty(&c).unwrap(), 1.5 + 1.0);
    }

    #[test]
    fn moment_rejects_single_element() {
        let z = Array3::from_elem((1, 1, 1), 0.3);
        assert!(moment_penalty(&z).is_err());
        assert!(moment_grad(&z).is_err());
    }

    #[test]
    fn tv_grad_matches_finite_differences() {
        check_grad(tv_penalty, tv_grad, &random_latent(11, 1.0));
    }

    #[test]
    fn range_grad_matches_finite_differences() {
        // Scale up so a good fraction of elements sit beyond the threshold.
        check_grad(range_penalty, range_grad, &random_latent(12, 4.0));
    }

    #[test]
    fn moment_grad_matches_finite_differences() {
        check_grad(
            |z| moment_penalty(z).unwrap(),
            |z| moment_grad(z).unwrap(),
            &random_latent(13, 1.3),
        );
    }

    #[test]
    fn combined_grad_matches_finite_differences() {
        let mut w = RegularizerWeights::raw_layer();
        w.moment_weight = 0.5;
        check_grad(
            |z| total_penalty(z, &w).unwrap(),
            |z| total_penalty_grad(z, &w).unwrap(),
            &random_latent(14, 2.0),
        );
    }

    #[test]
    fn default_bundles_on_constant_latents() {
        // SAE bundle on constant 4: range 0.5 * 1 + moment 0.5 * (4 + 1).
        let z = Array3::from_elem((4, 8, 8), 4.0);
        assert_eq!(total_penalty(&z, &RegularizerWeights::sae()).unwrap(), 3.0);
        // Raw bundle has moment weight 0, so an in-range constant costs nothing.
        let z = Array3::from_elem((4, 8, 8), 1.0);
        assert_eq!(
            total_penalty(&z, &RegularizerWeights::raw_layer()).unwrap(),
            0.0
        );
    }

    #[test]
    fn disabled_weights_are_free_and_zero() {
        let z = random_latent(15, 1.0);
        let w = RegularizerWeights::disabled();
        assert_eq!(total_penalty(&z, &w).unwrap(), 0.0);
        assert!(total_penalty_grad(&z, &w).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn validate_rejects_bad_fields() {
        let mut w = RegularizerWeights::raw_layer();
        w.tv_weight = -0.1;
        assert!(w.validate().is_err());
        let mut w = RegularizerWeights::raw_layer();
        w.scale_factor = 0.9;
        assert!(w.validate().is_err());
        assert!(RegularizerWeights::raw_layer().validate().is_ok());
        assert!(RegularizerWeights::sae().validate().is_ok());
        assert!(RegularizerWeights::disabled().validate().is_ok());
    }
}
