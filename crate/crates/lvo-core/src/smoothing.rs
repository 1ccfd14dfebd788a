//! Decaying Gaussian smoothing of the ascent gradient.
//!
//! The blur strength decays linearly over the optimization:
//! `sigma(step) = sigma0 * (1 - step/total_steps)`, reaching (but never
//! using) zero one step past the end. The blur is separable, uses symmetric
//! (edge-repeating) reflection at the borders, and its operator matrix is
//! symmetric and doubly stochastic, so it preserves both constants and the
//! spatial mean exactly.

use ndarray::Array3;

use crate::transform::reflect_index;

/// Discrete Gaussian taps for `sigma`, normalized to sum to 1.
fn kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

fn blur_channel(plane: &mut [f64], h: usize, w: usize, taps: &[f64]) {
    let radius = (taps.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    // Rows.
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let sx = reflect_index(x as i64 + k as i64 - radius, w);
                acc += t * plane[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    // Columns.
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let sy = reflect_index(y as i64 + k as i64 - radius, h);
                acc += t * tmp[sy * w + x];
            }
            plane[y * w + x] = acc;
        }
    }
}

/// Blur `g` per channel with `sigma(step) = sigma0 * (1 - step/total_steps)`.
/// `sigma = 0` (in particular `sigma0 = 0`) is the exact identity.
pub fn smooth_gradient(g: &Array3<f64>, step: usize, total_steps: usize, sigma0: f64) -> Array3<f64> {
    assert!(
        step < total_steps,
        "step {step} out of range for {total_steps} total steps"
    );
    let sigma = sigma0 * (1.0 - step as f64 / total_steps as f64);
    if sigma <= 0.0 {
        return g.clone();
    }
    let taps = kernel(sigma);
    let (c, h, w) = g.dim();
    let mut out = g.clone();
    for ch in 0..c {
        let mut plane: Vec<f64> = (0..h * w)
            .map(|i| out[[ch, i / w, i % w]])
            .collect();
        blur_channel(&mut plane, h, w, &taps);
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = plane[y * w + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_field(seed: u64) -> Array3<f64> {
        let mut rng = derive_rng(seed, &["test", "smoothing"]);
        Array3::from_shape_simple_fn((4, 8, 8), || StandardNormal.sample(&mut rng))
    }

    /// Independent dense-convolution oracle with explicit reflected padding.
    fn blur_oracle(g: &Array3<f64>, sigma: f64) -> Array3<f64> {
        let taps = kernel(sigma);
        let radius = (taps.len() / 2) as i64;
        let (c, h, w) = g.dim();
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (ky, &ty) in taps.iter().enumerate() {
                        for (kx, &tx) in taps.iter().enumerate() {
                            let sy = reflect_index(y as i64 + ky as i64 - radius, h);
                            let sx = reflect_index(x as i64 + kx as i64 - radius, w);
                            acc += ty * tx * g[[ch, sy, sx]];
                        }
                    }
                    out[[ch, y, x]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn sigma_zero_is_identity() {
        let g = random_field(1);
        assert_eq!(smooth_gradient(&g, 0, 100, 0.0), g);
        assert_eq!(smooth_gradient(&g, 42, 100, 0.0), g);
    }

    #[test]
    fn constant_field_is_unchanged() {
        let g = Array3::from_elem((2, 8, 8), -0.4);
        let b = smooth_gradient(&g, 0, 100, 2.0);
        for &v in b.iter() {
            assert!((v - -0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn final_step_blur_is_nearly_identity() {
        let g = random_field(2);
        let b = smooth_gradient(&g, 99, 100, 0.5);
        for (a, b) in g.iter().zip(b.iter()) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn mean_is_preserved() {
        let g = random_field(3);
        let b = smooth_gradient(&g, 0, 100, 1.5);
        let (c, h, w) = g.dim();
        for ch in 0..c {
            let before: f64 = (0..h * w).map(|i| g[[ch, i / w, i % w]]).sum();
            let after: f64 = (0..h * w).map(|i| b[[ch, i / w, i % w]]).sum();
            assert!((before - after).abs() < 1e-10);
        }
    }

    #[test]
    fn separable_blur_matches_dense_oracle() {
        let g = random_field(4);
        let sigma0 = 1.2;
        let got = smooth_gradient(&g, 25, 100, sigma0);
        let want = blur_oracle(&g, sigma0 * 0.75);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_reduces_high_frequency_energy() {
        let g = random_field(5);
        let b = smooth_gradient(&g, 0, 100, 1.0);
        let roughness = |z: &Array3<f64>| -> f64 {
            let (c, h, w) = z.dim();
            let mut acc = 0.0;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w - 1 {
                        acc += (z[[ch, y, x + 1]] - z[[ch, y, x]]).powi(2);
                    }
                }
            }
            acc / c as f64
        };
        assert!(roughness(&b) < roughness(&g));
    }
}
