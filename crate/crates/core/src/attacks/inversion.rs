//! Algebraic inversion of cached keys (and values) back to the normalized
//! attention input, followed by nearest-embedding rounding.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::{AttackReport, PositionRecord};
use super::slices::LayerSlices;
use crate::error::{Error, Result};
use crate::linalg::{invert, svd, Matrix, Rope};
use crate::model::{KvBlock, Weights};
use crate::scalar::{dot, norm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InversionMode {
    /// `x = k · R⁻¹ · (W_kᵀ)⁻¹`; needs a square invertible `W_k`.
    Exact,
    /// Minimum-norm solution of the stacked key and value equations.
    LeastSquares,
}

/// Recovered normalized inputs, one per cached position.
#[derive(Debug, Clone)]
pub struct Inverted {
    pub hidden: Vec<Vec<f64>>,
    pub rank_deficient: bool,
}

/// Solves for the normalized attention input of every cached position of
/// `layer` using that layer's projections.
pub fn invert_hidden<T: Scalar>(
    blocks: &[KvBlock<T>],
    weights: &Weights<T>,
    layer: usize,
    mode: InversionMode,
) -> Result<Inverted> {
    let cfg = &weights.config;
    let lw = weights
        .layers
        .get(layer)
        .ok_or_else(|| Error::IndexOutOfRange(format!("layer {layer} of {}", cfg.layers)))?;
    let slices = LayerSlices::from_blocks(blocks)?;
    if slices.head_dim != cfg.head_dim || slices.kv_heads != cfg.kv_heads {
        return Err(Error::DimensionMismatch("cache layout does not match the weights".into()));
    }
    let rope = Rope::new(cfg.head_dim, cfg.rope_base)?;
    let wk: Matrix<f64> = lw.wk.cast();
    let (solver, rank_deficient) = match mode {
        InversionMode::Exact => {
            if wk.rows() != wk.cols() {
                return Err(Error::UnsupportedArchitecture(format!(
                    "exact inversion needs a square key projection, got {}x{}",
                    wk.rows(),
                    wk.cols()
                )));
            }
            (invert(&wk)?, false)
        }
        InversionMode::LeastSquares => {
            let wv: Matrix<f64> = lw.wv.cast();
            let stacked = Matrix::from_fn(wk.rows() + wv.rows(), wk.cols(), |r, c| {
                if r < wk.rows() {
                    wk.get(r, c)
                } else {
                    wv.get(r - wk.rows(), c)
                }
            });
            let s = svd(&stacked)?;
            (s.pseudo_inverse(), s.rank() < stacked.cols())
        }
    };
    let d = cfg.head_dim;
    let mut hidden = Vec::with_capacity(slices.len());
    for (pos, (k, v)) in slices.keys.iter().zip(&slices.values).enumerate() {
        let rot = rope.rotation::<f64>(pos);
        let mut k = k.clone();
        for kh in k.chunks_mut(d) {
            Rope::apply_inverse(kh, &rot);
        }
        let rhs = match mode {
            InversionMode::Exact => k,
            InversionMode::LeastSquares => k.into_iter().chain(v.iter().copied()).collect(),
        };
        hidden.push(solver.mul_vec(&rhs));
    }
    Ok(Inverted { hidden, rank_deficient })
}

/// Index of the embedding row with the highest cosine similarity to
/// `direction`. Zero rows score zero, and a zero direction matches a zero
/// row when one exists.
pub fn nearest_embedding<T: Scalar>(embedding: &Matrix<T>, direction: &[f64]) -> usize {
    let dn = norm(direction);
    let mut best = (f64::NEG_INFINITY, 0);
    for r in 0..embedding.rows() {
        let row: Vec<f64> = embedding.row(r).iter().map(|x| x.as_f64()).collect();
        let rn = norm(&row);
        let score = if dn == 0.0 {
            if rn == 0.0 {
                1.0
            } else {
                0.0
            }
        } else if rn == 0.0 {
            0.0
        } else {
            dot(&row, direction) / (rn * dn)
        };
        if score > best.0 {
            best = (score, r);
        }
    }
    best.1
}

/// Inversion attack on the blocks of one layer. The recovered vector is the
/// RMS-normalized input; dividing by the norm gain gives the direction of the
/// pre-norm hidden state, which is rounded to the nearest embedding row.
pub fn inversion_attack<T: Scalar>(
    blocks: &[KvBlock<T>],
    weights: &Weights<T>,
    layer: usize,
    mode: InversionMode,
    truth: Option<&[u32]>,
) -> Result<AttackReport> {
    let start = Instant::now();
    let inverted = invert_hidden(blocks, weights, layer, mode)?;
    let gain: Vec<f64> = weights.layers[layer].attn_norm_gain.iter().map(|g| g.as_f64()).collect();
    let per_position = inverted
        .hidden
        .iter()
        .map(|x| {
            let direction: Vec<f64> = x.iter().zip(&gain).map(|(v, g)| if *g == 0.0 { 0.0 } else { v / g }).collect();
            PositionRecord::direct(nearest_embedding(&weights.embedding, &direction) as u32)
        })
        .collect();
    let mut report = AttackReport::new(per_position, start.elapsed().as_secs_f64()).scored(truth);
    report.protected_input = blocks.iter().any(|b| b.state != crate::model::BlockState::Plaintext);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, Model, ModelConfig};

    #[test]
    fn zero_direction_matches_zero_row() {
        let mut e = Matrix::<f64>::from_fn(4, 3, |r, c| (r + c + 1) as f64);
        e.row_mut(2).fill(0.0);
        assert_eq!(nearest_embedding(&e, &[0.0, 0.0, 0.0]), 2);
    }

    #[test]
    fn exact_inversion_recovers_mha_layer0() {
        let cfg = ModelConfig { layers: 2, hidden: 32, heads: 2, kv_heads: 2, head_dim: 16, vocab: 64, block_size: 4, ..ModelConfig::toy_mha() };
        let model = Model::new(init_weights(&cfg, 1).unwrap()).unwrap();
        let tokens: Vec<u32> = (0..11).map(|i| (i * 7 % 64) as u32).collect();
        let (_, cache) = model.forward_prefill(&tokens).unwrap();
        let blocks = cache.extract_layer_kv(0).unwrap();
        let r = inversion_attack(&blocks, model.weights(), 0, InversionMode::Exact, Some(&tokens)).unwrap();
        assert_eq!(r.exact_match, Some(1.0));
    }

    #[test]
    fn exact_mode_rejects_gqa() {
        let cfg = ModelConfig { layers: 1, hidden: 32, heads: 2, kv_heads: 1, head_dim: 16, vocab: 16, block_size: 4, ..ModelConfig::toy_mha() };
        let model = Model::new(init_weights(&cfg, 1).unwrap()).unwrap();
        let (_, cache) = model.forward_prefill(&[1, 2, 3]).unwrap();
        let blocks = cache.extract_layer_kv(0).unwrap();
        let err = inversion_attack(&blocks, model.weights(), 0, InversionMode::Exact, None).unwrap_err();
        assert!(matches!(err, Error::UnsupportedArchitecture(_)));
    }
}
