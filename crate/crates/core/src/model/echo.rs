//! Hand-built two-layer "echo" decoder whose greedy continuation repeats the
//! content that follows a previous occurrence of the current token (an
//! induction circuit). Feeding it `[BOS]` after a `BOS`-prefixed sequence
//! makes it regenerate that sequence.
//!
//! Residual layout (`D = 256`): token content in `[0, 96)`, previous-token
//! content in `[96, 192)`, a constant coordinate, a filler coordinate for
//! ordinary tokens and a BOS flag.
//!
//! Layer 0, head 0 attends to the previous position using only the
//! high-frequency RoPE pairs and copies its token content. Layer 1, head 0
//! matches the current token against the copied content through the
//! lowest-frequency RoPE pairs (which barely rotate over the context) and
//! writes the matched position's token back into the content subspace.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LayerWeights, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Rope};

pub const BOS: u32 = 0;

const CONTENT: usize = 96;
const PREV: usize = 96;
const CONST_DIM: usize = 192;
const FILLER_DIM: usize = 193;
const BOS_DIM: usize = 194;
const HEAD_DIM: usize = 128;
const HIDDEN: usize = 256;
/// High-frequency pairs used by the previous-token head.
const POSITIONAL_PAIRS: usize = 5;
/// First pair slow enough to carry content without visible rotation.
const FIRST_CONTENT_PAIR: usize = 12;

/// Sharpness of the previous-token kernel after the `1/√d` scaling.
const PREV_SHARPNESS: f64 = 50.0;
/// Induction match score after scaling.
const MATCH_SHARPNESS: f64 = 40.0;
const BOS_PENALTY: f64 = 2.0;
/// Gain of the copied token in the output subspace.
const COPY_GAIN: f64 = 4.0;

pub fn echo_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: HIDDEN,
        heads: 2,
        kv_heads: 2,
        head_dim: HEAD_DIM,
        vocab,
        rope_base: 1e20,
        block_size: 16,
        norm_eps: 0.0,
        mlp_hidden: 0,
    }
}

/// Builds the echo weights. Token 0 is [`BOS`].
pub fn echo_weights(vocab: usize, seed: u64) -> Result<Weights<f64>> {
    if vocab < 2 {
        return Err(Error::InvalidConfig("echo model needs at least two tokens".into()));
    }
    let config = echo_config(vocab);
    config.validate()?;
    let half = HEAD_DIM / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut embedding = Matrix::zeros(vocab, HIDDEN);
    for t in 0..vocab {
        let mut u: Vec<f64> = (0..CONTENT).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = crate::scalar::norm(&u);
        u.iter_mut().for_each(|x| *x /= n);
        for (c, x) in u.into_iter().enumerate() {
            embedding.set(t, c, x);
        }
        embedding.set(t, CONST_DIM, 1.0);
        if t == BOS as usize {
            embedding.set(t, BOS_DIM, 1.0);
        } else {
            embedding.set(t, FILLER_DIM, 1.0);
        }
    }
    // Every embedding has norm √3, and after layer 0 every residual has norm 2.
    let rms_scale_0 = (HIDDEN as f64).sqrt() / 3f64.sqrt();
    let rms_scale_1 = (HIDDEN as f64).sqrt() / 2.0;
    let sqrt_d = (HEAD_DIM as f64).sqrt();

    let rope = Rope::new(HEAD_DIM, config.rope_base)?;
    let freqs = rope.frequencies();

    // Layer 0: previous-token head.
    let mut l0 = empty_layer(&config);
    let w = (PREV_SHARPNESS * sqrt_d / POSITIONAL_PAIRS as f64).sqrt();
    for (j, &theta) in freqs.iter().enumerate().take(POSITIONAL_PAIRS) {
        l0.wq.set(j, CONST_DIM, w / rms_scale_0);
        // Key pre-rotated by one step so the score peaks at offset one.
        l0.wk.set(j, CONST_DIM, w * theta.cos() / rms_scale_0);
        l0.wk.set(j + half, CONST_DIM, -w * theta.sin() / rms_scale_0);
    }
    for c in 0..CONTENT {
        l0.wv.set(c, c, 1.0 / rms_scale_0);
        l0.wo.set(PREV + c, c, 1.0);
    }

    // Layer 1: induction head.
    let mut l1 = empty_layer(&config);
    let slots: Vec<usize> = (FIRST_CONTENT_PAIR..half).flat_map(|p| [p, p + half]).collect();
    if slots.len() < CONTENT + 1 {
        return Err(Error::InvalidConfig("not enough slow rotary pairs for content".into()));
    }
    let lambda = (MATCH_SHARPNESS * sqrt_d).sqrt();
    for c in 0..CONTENT {
        l1.wq.set(slots[c], c, lambda / rms_scale_1);
        l1.wk.set(slots[c], PREV + c, lambda / rms_scale_1);
        l1.wv.set(c, c, 1.0 / rms_scale_1);
        l1.wo.set(c, c, COPY_GAIN);
    }
    // Suppress the BOS position itself, whose previous-token slot holds BOS.
    let penalty_slot = slots[CONTENT];
    l1.wq.set(penalty_slot, CONST_DIM, lambda / rms_scale_1);
    l1.wk.set(penalty_slot, BOS_DIM, -BOS_PENALTY * lambda / rms_scale_1);

    let weights = Weights {
        config,
        embedding,
        layers: vec![l0, l1],
        final_norm_gain: vec![1.0; HIDDEN],
    };
    weights.validate()?;
    Ok(weights)
}

fn empty_layer(config: &ModelConfig) -> LayerWeights<f64> {
    LayerWeights {
        wq: Matrix::zeros(config.hidden, config.hidden),
        wk: Matrix::zeros(config.kv_dim(), config.hidden),
        wv: Matrix::zeros(config.kv_dim(), config.hidden),
        wo: Matrix::zeros(config.hidden, config.hidden),
        attn_norm_gain: vec![1.0; config.hidden],
        mlp: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;
    use rand::Rng;

    #[test]
    fn echo_repeats_sequence_after_bos() {
        let model = Model::new(echo_weights(2048, 1).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seq = vec![BOS];
        while seq.len() < 31 {
            let t = rng.random_range(1..2048u32);
            if !seq.contains(&t) {
                seq.push(t);
            }
        }
        let (_, mut cache) = model.forward_prefill(&seq).unwrap();
        model.decode_step(&mut cache, BOS).unwrap();
        let out = model.generate_greedy(&mut cache, 30).unwrap();
        assert_eq!(out, seq[1..].to_vec());
    }
}
