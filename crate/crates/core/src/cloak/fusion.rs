//! Folding `M1` and `M2` into the attention projections.

use super::key::KeyMaterial;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Weights;
use crate::scalar::Scalar;

/// Weights with the secret column transforms folded in. Caches produced by
/// these weights hold `K·M1` and `V·M2` directly.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedWeights<T>(Weights<T>);

impl<T: Scalar> FusedWeights<T> {
    pub fn as_weights(&self) -> &Weights<T> {
        &self.0
    }

    pub fn into_weights(self) -> Weights<T> {
        self.0
    }
}

/// Left-multiplies every `d`-row head block of `w` by `m`.
fn left_per_head<T: Scalar>(m: &Matrix<f64>, w: &Matrix<T>) -> Result<Matrix<T>> {
    let d = m.rows();
    if w.rows() % d != 0 {
        return Err(Error::DimensionMismatch(format!("{} rows are not a multiple of head_dim {d}", w.rows())));
    }
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for h in 0..w.rows() / d {
        let block: Matrix<f64> = w.block(h * d, 0, d, w.cols()).cast();
        out.set_block(h * d, 0, &m.matmul(&block)?.cast());
    }
    Ok(out)
}

/// Right-multiplies every `d`-column head block of `w` by `m`.
fn right_per_head<T: Scalar>(w: &Matrix<T>, m: &Matrix<f64>) -> Result<Matrix<T>> {
    let d = m.rows();
    if w.cols() % d != 0 {
        return Err(Error::DimensionMismatch(format!("{} columns are not a multiple of head_dim {d}", w.cols())));
    }
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for h in 0..w.cols() / d {
        let block: Matrix<f64> = w.block(0, h * d, w.rows(), d).cast();
        out.set_block(0, h * d, &block.matmul(m)?.cast());
    }
    Ok(out)
}

/// Per head: `W_q ← M1⁻¹ W_q`, `W_k ← M1ᵀ W_k`, `W_v ← M2ᵀ W_v` and
/// `W_o ← W_o (M2⁻¹)ᵀ`. Products are formed in double precision.
pub fn fuse_weights<T: Scalar>(weights: &Weights<T>, material: &KeyMaterial) -> Result<FusedWeights<T>> {
    let cfg = &weights.config;
    if cfg.head_dim != material.head_dim {
        return Err(Error::Key(format!("key head_dim {} for model head_dim {}", material.head_dim, cfg.head_dim)));
    }
    let mut fused = weights.clone();
    for (l, lw) in fused.layers.iter_mut().enumerate() {
        let lm = material.for_layer(l)?;
        let m1_inv = lm.m1.invert().materialize();
        let m1_t = lm.m1.transpose().materialize();
        let m2_t = lm.m2.transpose().materialize();
        let m2_inv_t = lm.m2.invert().transpose().materialize();
        lw.wq = left_per_head(&m1_inv, &lw.wq)?;
        lw.wk = left_per_head(&m1_t, &lw.wk)?;
        lw.wv = left_per_head(&m2_t, &lw.wv)?;
        lw.wo = right_per_head(&lw.wo, &m2_inv_t)?;
    }
    fused.validate()?;
    Ok(FusedWeights(fused))
}
