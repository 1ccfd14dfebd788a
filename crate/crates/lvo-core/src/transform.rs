//! Random spatial transforms for optimization robustness.
//!
//! A drawn transform is materialized as an explicit `(H*W) x (H*W)` matrix
//! acting on each channel independently, so application is exactly linear in
//! the latent and the adjoint the optimizer needs is exactly the transpose.
//! Latents here are small (8x8 spatial), which keeps the dense matrix cheap.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use crate::error::{LvoError, Result};
use crate::regularize::RegularizerWeights;

/// Parameters drawn for one random transform: integer pixel shift `(dx, dy)`,
/// rotation in degrees, and zoom factor.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformRecord {
    pub jitter: (i64, i64),
    pub rotation_deg: f64,
    pub scale: f64,
}

impl TransformRecord {
    pub const IDENTITY: TransformRecord = TransformRecord {
        jitter: (0, 0),
        rotation_deg: 0.0,
        scale: 1.0,
    };

    /// Draw jitter uniformly from `{-jitter_px, ..., +jitter_px}^2`, rotation
    /// uniformly from `[-rotation_deg, +rotation_deg]`, and scale uniformly
    /// from `[1/scale_factor, scale_factor]`.
    ///
    /// Draw order is fixed (dx, dy, rotation, scale); degenerate settings
    /// (0 px, 0 degrees, factor 1) produce the identity component without
    /// consuming a draw.
    pub fn sample(w: &RegularizerWeights, rng: &mut impl Rng) -> TransformRecord {
        let j = w.jitter_px as i64;
        let dx = if j == 0 { 0 } else { rng.random_range(-j..=j) };
        let dy = if j == 0 { 0 } else { rng.random_range(-j..=j) };
        let rotation_deg = if w.rotation_deg == 0.0 {
            0.0
        } else {
            rng.random_range(-w.rotation_deg..w.rotation_deg)
        };
        let scale = if w.scale_factor == 1.0 {
            1.0
        } else {
            rng.random_range(1.0 / w.scale_factor..w.scale_factor)
        };
        TransformRecord {
            jitter: (dx, dy),
            rotation_deg,
            scale,
        }
    }
}

/// Symmetric (edge-repeating) reflection of an index into `[0, n)`.
pub(crate) fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// A materialized transform: shift, then rotation, then scale, composed into
/// one bilinear warp with reflective padding.
#[derive(Debug, Clone)]
pub struct TransformOp {
    pub record: TransformRecord,
    h: usize,
    w: usize,
    /// Row `oy*w + ox` holds the input-pixel weights of output pixel (oy, ox).
    matrix: Array2<f64>,
}

impl TransformOp {
    pub fn from_record(record: TransformRecord, h: usize, w: usize) -> TransformOp {
        let n = h * w;
        let mut matrix = Array2::zeros((n, n));
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let alpha = record.rotation_deg.to_radians();
        let (sin_a, cos_a) = alpha.sin_cos();
        let s = record.scale;
        let (dx, dy) = (record.jitter.0 as f64, record.jitter.1 as f64);
        for oy in 0..h {
            for ox in 0..w {
                // Pull-back: undo scale, undo rotation, undo shift.
                let qy = (oy as f64 - cy) / s;
                let qx = (ox as f64 - cx) / s;
                let src_x = qx * cos_a + qy * sin_a + cx - dx;
                let src_y = -qx * sin_a + qy * cos_a + cy - dy;
                let y0 = src_y.floor();
                let x0 = src_x.floor();
                let fy = src_y - y0;
                let fx = src_x - x0;
                let row = oy * w + ox;
                for (oy2, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                    for (ox2, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                        let weight = wy * wx;
                        // Skipping zero weights keeps degenerate draws exact.
                        if weight == 0.0 {
                            continue;
                        }
                        let iy = reflect_index(y0 as i64 + oy2, h);
                        let ix = reflect_index(x0 as i64 + ox2, w);
                        matrix[[row, iy * w + ix]] += weight;
                    }
                }
            }
        }
        TransformOp {
            record,
            h,
            w,
            matrix,
        }
    }

    pub fn identity(h: usize, w: usize) -> TransformOp {
        TransformOp::from_record(TransformRecord::IDENTITY, h, w)
    }

    pub fn sample(
        weights: &RegularizerWeights,
        h: usize,
        w: usize,
        rng: &mut impl Rng,
    ) -> TransformOp {
        TransformOp::from_record(TransformRecord::sample(weights, rng), h, w)
    }

    fn check_shape(&self, z: &Array3<f64>) -> Result<()> {
        let (_, h, w) = z.dim();
        if h != self.h || w != self.w {
            return Err(LvoError::shape(
                format!("spatial dims {}x{}", self.h, self.w),
                format!("{h}x{w}"),
            ));
        }
        Ok(())
    }

    fn apply_matrix(&self, m: &Array2<f64>, z: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_shape(z)?;
        let (c, h, w) = z.dim();
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            let x: Array1<f64> = z
                .index_axis(Axis(0), ch)
                .iter()
                .copied()
                .collect::<Array1<f64>>();
            let y = m.dot(&x);
            let y = y
                .into_shape_with_order((h, w))
                .expect("h*w vector reshapes to (h, w)");
            out.index_axis_mut(Axis(0), ch).assign(&y);
        }
        Ok(out)
    }

    pub fn apply(&self, z: &Array3<f64>) -> Result<Array3<f64>> {
        self.apply_matrix(&self.matrix, z)
    }

    /// Exact adjoint of [`TransformOp::apply`]: multiplies by the transpose.
    pub fn adjoint(&self, g: &Array3<f64>) -> Result<Array3<f64>> {
        let mt = self.matrix.t().to_owned();
        self.apply_matrix(&mt, g)
    }
}

/// Draw a random transform and apply it. The record of drawn parameters is
/// returned so the caller can rebuild the exact operator (and its adjoint)
/// with [`TransformOp::from_record`].
pub fn apply_random_transform(
    z: &Array3<f64>,
    weights: &RegularizerWeights,
    rng: &mut impl Rng,
) -> Result<(Array3<f64>, TransformRecord)> {
    let (_, h, w) = z.dim();
    let op = TransformOp::sample(weights, h, w, rng);
    Ok((op.apply(z)?, op.record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_field(seed: u64) -> Array3<f64> {
        let mut rng = derive_rng(seed, &["test", "field"]);
        Array3::from_shape_simple_fn((4, 8, 8), || StandardNormal.sample(&mut rng))
    }

    fn level(jitter: u32, rot: f64, scale: f64) -> RegularizerWeights {
        let mut w = RegularizerWeights::disabled();
        w.jitter_px = jitter;
        w.rotation_deg = rot;
        w.scale_factor = scale;
        w
    }

    #[test]
    fn degenerate_draw_is_identity() {
        let z = random_field(1);
        let mut rng = derive_rng(1, &["transform"]);
        let (out, record) = apply_random_transform(&z, &level(0, 0.0, 1.0), &mut rng).unwrap();
        assert_eq!(record, TransformRecord::IDENTITY);
        assert_eq!(out, z);
    }

    #[test]
    fn jitter_one_draws_integer_shifts_in_range() {
        let mut rng = derive_rng(2, &["transform"]);
        let w = level(1, 0.0, 1.0);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let r = TransformRecord::sample(&w, &mut rng);
            assert!((-1..=1).contains(&r.jitter.0));
            assert!((-1..=1).contains(&r.jitter.1));
            assert_eq!(r.rotation_deg, 0.0);
            assert_eq!(r.scale, 1.0);
            seen.insert(r.jitter);
        }
        assert_eq!(seen.len(), 9, "all nine shifts should occur");
    }

    #[test]
    fn pure_jitter_moves_content() {
        let mut z = Array3::zeros((1, 8, 8));
        z[[0, 3, 3]] = 1.0;
        let record = TransformRecord {
            jitter: (1, 0),
            rotation_deg: 0.0,
            scale: 1.0,
        };
        let out = TransformOp::from_record(record, 8, 8).apply(&z).unwrap();
        assert_eq!(out[[0, 3, 4]], 1.0);
        assert_eq!(out.sum(), 1.0);
    }

    #[test]
    fn constant_latent_stays_constant() {
        let z = Array3::from_elem((2, 8, 8), 1.25);
        let mut rng = derive_rng(3, &["transform"]);
        for _ in 0..20 {
            let (out, _) = apply_random_transform(&z, &level(2, 30.0, 1.5), &mut rng).unwrap();
            for &v in out.iter() {
                assert!((v - 1.25).abs() < 1e-6, "constant drifted to {v}");
            }
        }
    }

    #[test]
    fn rows_are_convex_weights() {
        let mut rng = derive_rng(4, &["transform"]);
        let record = TransformRecord::sample(&level(8, 45.0, 1.8), &mut rng);
        let op = TransformOp::from_record(record, 8, 8);
        for row in op.matrix.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn same_seed_is_bit_reproducible() {
        let z = random_field(5);
        let w = level(2, 15.0, 1.2);
        let mut a = derive_rng(9, &["transform"]);
        let mut b = derive_rng(9, &["transform"]);
        let (za, ra) = apply_random_transform(&z, &w, &mut a).unwrap();
        let (zb, rb) = apply_random_transform(&z, &w, &mut b).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(za, zb);
    }

    #[test]
    fn adjoint_matches_inner_products_and_finite_differences() {
        let mut rng = derive_rng(6, &["transform"]);
        for trial in 0..3 {
            let z = random_field(20 + trial);
            let u = random_field(40 + trial);
            let record = TransformRecord::sample(&level(2, 25.0, 1.4), &mut rng);
            let op = TransformOp::from_record(record, 8, 8);
            let tz = op.apply(&z).unwrap();
            let tu = op.adjoint(&u).unwrap();
            let lhs = (&tz * &u).sum();
            let rhs = (&z * &tu).sum();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));

            // d<T z, u>/dz_i equals (T^t u)_i; exercise a few coordinates.
            let h = 1e-3;
            for idx in [(0, 0, 0), (1, 4, 4), (3, 7, 2)] {
                let mut zp = z.clone();
                zp[idx] += h;
                let mut zm = z.clone();
                zm[idx] -= h;
                let fp = (op.apply(&zp).unwrap() * &u).sum();
                let fm = (op.apply(&zm).unwrap() * &u).sum();
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - tu[idx]).abs();
                assert!(
                    err <= 1e-3 * tu[idx].abs().max(1.0),
                    "fd {fd} vs adjoint {} at {idx:?}",
                    tu[idx]
                );
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let op = TransformOp::identity(8, 8);
        let z = Array3::zeros((1, 4, 4));
        assert!(op.apply(&z).is_err());
    }
}
