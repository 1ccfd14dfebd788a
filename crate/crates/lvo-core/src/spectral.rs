//! Frequency-domain gradient filtering.
//!
//! Scales every 2-D Fourier bin of the gradient by the inverse of its radial
//! frequency, clamped at the smallest nonzero bin so the weight function is
//! finite at DC, then rescales so the maximum weight is 1. DC and the
//! fundamental therefore pass unattenuated while higher frequencies are
//! suppressed proportionally to 1/frequency.

use ndarray::Array3;
use num_complex::Complex;
use rustfft::FftPlanner;

/// Signed normalized frequency of bin `i` out of `n`, in cycles per pixel.
fn signed_freq(i: usize, n: usize) -> f64 {
    let i = i as i64;
    let n = n as i64;
    let k = if i <= n / 2 { i } else { i - n };
    k as f64 / n as f64
}

/// Per-bin filter weights for an `h x w` grid, row-major.
fn weight_grid(h: usize, w: usize) -> Vec<f64> {
    let f_min = (1.0 / h as f64).min(1.0 / w as f64);
    let mut grid = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = signed_freq(y, h);
        for x in 0..w {
            let fx = signed_freq(x, w);
            let r = (fy * fy + fx * fx).sqrt();
            grid.push(f_min / r.max(f_min));
        }
    }
    grid
}

/// Filter each channel of `g` in the Fourier domain; the imaginary residue of
/// the inverse transform is discarded. Output shape equals input shape.
pub fn spectral_filter(g: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = g.dim();
    let mut planner = FftPlanner::new();
    let fwd_w = planner.plan_fft_forward(w);
    let fwd_h = planner.plan_fft_forward(h);
    let inv_w = planner.plan_fft_inverse(w);
    let inv_h = planner.plan_fft_inverse(h);
    let weights = weight_grid(h, w);
    let norm = 1.0 / (h * w) as f64;

    let mut out = Array3::zeros((c, h, w));
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] = Complex::new(g[[ch, y, x]], 0.0);
            }
        }
        for row in buf.chunks_exact_mut(w) {
            fwd_w.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            fwd_h.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        for (v, &wgt) in buf.iter_mut().zip(&weights) {
            *v *= wgt;
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            inv_h.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        for row in buf.chunks_exact_mut(w) {
            inv_w.process(row);
        }
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = buf[y * w + x].re * norm;
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
    use std::f64::consts::TAU;

    fn random_field(seed: u64) -> Array3<f64> {
        let mut rng = derive_rng(seed, &["test", "spectral"]);
        Array3::from_shape_simple_fn((4, 8, 8), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn zero_maps_to_zero() {
        let g = Array3::zeros((2, 8, 8));
        assert_eq!(spectral_filter(&g), g);
    }

    #[test]
    fn constant_passes_unchanged() {
        let g = Array3::from_elem((1, 8, 8), 0.7);
        let f = spectral_filter(&g);
        for &v in f.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_is_linear() {
        let g1 = random_field(1);
        let g2 = random_field(2);
        let combined = spectral_filter(&(&g1 * 2.0 + &g2 * -0.5));
        let separate = spectral_filter(&g1) * 2.0 + spectral_filter(&g2) * -0.5;
        for (a, b) in combined.iter().zip(separate.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn weights_are_monotone_in_radius_with_max_one() {
        let (h, w) = (8, 8);
        let grid = weight_grid(h, w);
        let mut bins: Vec<(f64, f64)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let fy = signed_freq(y, h);
                let fx = signed_freq(x, w);
                bins.push(((fy * fy + fx * fx).sqrt(), grid[y * w + x]));
            }
        }
        bins.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut prev = f64::INFINITY;
        for (_, wgt) in &bins {
            assert!(*wgt <= prev + 1e-15);
            prev = *wgt;
        }
        let max = bins.iter().map(|(_, w)| *w).fold(f64::MIN, f64::max);
        assert!((max - 1.0).abs() < 1e-15);
        // DC and the fundamental both sit at the maximum.
        assert_eq!(grid[0], 1.0);
        assert_eq!(grid[1], 1.0);
    }

    #[test]
    fn two_sinusoids_attenuate_by_frequency_ratio() {
        // Equal-amplitude sinusoids at 1 and 3 cycles per 8 pixels; after
        // filtering the amplitude ratio lo:hi must equal f_hi/f_lo = 3.
        let (h, w) = (8usize, 8usize);
        let mut g = Array3::zeros((1, h, w));
        for y in 0..h {
            for x in 0..w {
                let lo = (TAU * 1.0 * x as f64 / w as f64).cos();
                let hi = (TAU * 3.0 * x as f64 / w as f64).cos();
                g[[0, y, x]] = lo + hi;
            }
        }
        let f = spectral_filter(&g);
        // Project onto each basis function (orthogonal over the grid).
        let mut amp = [0.0f64; 2];
        for (slot, cycles) in [(0usize, 1.0f64), (1, 3.0)] {
            let mut dot = 0.0;
            let mut norm = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let b = (TAU * cycles * x as f64 / w as f64).cos();
                    dot += f[[0, y, x]] * b;
                    norm += b * b;
                }
            }
            amp[slot] = dot / norm;
        }
        let ratio = amp[0] / amp[1];
        assert!(
            (ratio - 3.0).abs() < 1e-9,
            "expected lo:hi amplitude ratio 3, got {ratio}"
        );
    }
}
