//! Top-k sparse autoencoder over hooked layer activations.
//!
//! Activations are `(tokens, channels)` matrices. Per token, the encoder
//! computes `pre = W_e (F_token - b_dec) + b_enc`, keeps the `k` largest
//! pre-activations (ties broken toward the lower feature index), zeroes the
//! rest, and clamps at 0. Decoder directions are unit-norm rows.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{LvoError, Result};

#[derive(Debug, Clone)]
pub struct SparseAutoencoder {
    input_dim: usize,
    dict_size: usize,
    k: usize,
    w_enc: Array2<f64>,
    b_enc: Array1<f64>,
    w_dec: Array2<f64>,
    b_dec: Array1<f64>,
}

/// Mask of the `k` largest entries of `pre`; ties go to the lower index.
pub fn topk_mask(pre: ArrayView1<f64>, k: usize) -> Vec<bool> {
    let m = pre.len();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&i, &j| pre[j].total_cmp(&pre[i]).then(i.cmp(&j)));
    let mut mask = vec![false; m];
    for &i in idx.iter().take(k.min(m)) {
        mask[i] = true;
    }
    mask
}

impl SparseAutoencoder {
    /// Build an SAE from raw weights. `w_enc` and `w_dec` are
    /// `(dict_size, input_dim)`; decoder rows are renormalized to unit norm
    /// here, and a zero decoder row is rejected.
    pub fn new(
        w_enc: Array2<f64>,
        b_enc: Array1<f64>,
        w_dec: Array2<f64>,
        b_dec: Array1<f64>,
        k: usize,
    ) -> Result<SparseAutoencoder> {
        let (dict_size, input_dim) = w_enc.dim();
        if w_dec.dim() != (dict_size, input_dim) {
            return Err(LvoError::shape(
                format!("decoder weights {dict_size}x{input_dim}"),
                format!("{:?}", w_dec.dim()),
            ));
        }
        if b_enc.len() != dict_size || b_dec.len() != input_dim {
            return Err(LvoError::shape(
                format!("biases of length {dict_size} and {input_dim}"),
                format!("{} and {}", b_enc.len(), b_dec.len()),
            ));
        }
        if k == 0 || k > dict_size {
            return Err(LvoError::Config(format!(
                "k must be in 1..={dict_size}, got {k}"
            )));
        }
        let mut w_dec = w_dec;
        for (i, mut row) in w_dec.rows_mut().into_iter().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(LvoError::Config(format!("decoder direction {i} is zero")));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(SparseAutoencoder {
            input_dim,
            dict_size,
            k,
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn dict_size(&self) -> usize {
        self.dict_size
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn encoder_weights(&self) -> &Array2<f64> {
        &self.w_enc
    }

    pub fn encoder_bias(&self) -> &Array1<f64> {
        &self.b_enc
    }

    pub fn decoder_bias(&self) -> &Array1<f64> {
        &self.b_dec
    }

    pub fn decoder_weights(&self) -> &Array2<f64> {
        &self.w_dec
    }

    /// The unit-norm decoder direction `d_i`.
    pub fn decoder_direction(&self, i: usize) -> Result<ArrayView1<'_, f64>> {
        self.check_feature(i)?;
        Ok(self.w_dec.row(i))
    }

    fn check_feature(&self, i: usize) -> Result<()> {
        if i >= self.dict_size {
            return Err(LvoError::Config(format!(
                "feature {i} out of range for dictionary of {}",
                self.dict_size
            )));
        }
        Ok(())
    }

    fn check_width(&self, f: &Array2<f64>) -> Result<()> {
        if f.ncols() != self.input_dim {
            return Err(LvoError::shape(
                format!("activation width {}", self.input_dim),
                f.ncols(),
            ));
        }
        Ok(())
    }

    /// Pre-activations before sparsification, `(tokens, dict_size)`.
    pub fn pre_activations(&self, f: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_width(f)?;
        let centered = f - &self.b_dec;
        Ok(centered.dot(&self.w_enc.t()) + &self.b_enc)
    }

    /// Sparse feature activations, `(tokens, dict_size)`, nonnegative with at
    /// most `k` nonzeros per token.
    pub fn encode(&self, f: &Array2<f64>) -> Result<Array2<f64>> {
        let mut pre = self.pre_activations(f)?;
        for mut row in pre.rows_mut() {
            let mask = topk_mask(row.view(), self.k);
            for (v, keep) in row.iter_mut().zip(mask) {
                *v = if keep && *v > 0.0 { *v } else { 0.0 };
            }
        }
        Ok(pre)
    }

    /// Reconstruction `b_dec + sum_i a_i d_i` per token, `(tokens, input_dim)`.
    pub fn decode(&self, a: &Array2<f64>) -> Result<Array2<f64>> {
        if a.ncols() != self.dict_size {
            return Err(LvoError::shape(
                format!("activation map width {}", self.dict_size),
                a.ncols(),
            ));
        }
        Ok(a.dot(&self.w_dec) + &self.b_dec)
    }

    /// Max over tokens of feature `i`'s encoded activation.
    pub fn feature_activation(&self, f: &Array2<f64>, i: usize) -> Result<f64> {
        self.check_feature(i)?;
        let a = self.encode(f)?;
        Ok(a.column(i).iter().fold(0.0f64, |acc, &v| acc.max(v)))
    }
}
