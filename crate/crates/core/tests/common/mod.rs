//! Shared fixtures and a cache-free reference forward pass.
#![allow(dead_code)]

use kvcloak::model::{init_weights, Model, ModelConfig, Weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_config() -> ModelConfig {
    ModelConfig { layers: 2, hidden: 32, heads: 2, kv_heads: 2, head_dim: 16, vocab: 64, block_size: 4, ..ModelConfig::toy_mha() }
}

pub fn weights(cfg: &ModelConfig, seed: u64) -> Weights<f64> {
    init_weights(cfg, seed).expect("valid config")
}

pub fn model<T: kvcloak::Scalar>(cfg: &ModelConfig, seed: u64) -> Model<T> {
    Model::new(weights(cfg, seed).cast()).expect("valid weights")
}

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

fn rms(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

/// `W x` for a row-major `out × in` weight given as rows.
fn project(w: &kvcloak::Matrix64, x: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Rotates consecutive half-split pairs of `v` by `pos · base^(−2j/d)`.
fn rotate(v: &mut [f64], pos: usize, base: f64) {
    let d = v.len();
    let half = d / 2;
    for j in 0..half {
        let angle = pos as f64 * base.powf(-2.0 * j as f64 / d as f64);
        let (a, b) = (v[j], v[j + half]);
        v[j] = a * angle.cos() + b * angle.sin();
        v[j + half] = b * angle.cos() - a * angle.sin();
    }
}

/// Logits after every position, recomputing full causal attention over the
/// whole prefix at each layer instead of reading a cache.
pub fn reference_logits(w: &Weights<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &w.config;
    let d = cfg.head_dim;
    let group = cfg.heads / cfg.kv_heads;
    let mut hidden: Vec<Vec<f64>> = tokens.iter().map(|&t| w.embedding.row(t as usize).to_vec()).collect();
    for lw in &w.layers {
        let normed: Vec<Vec<f64>> = hidden.iter().map(|h| rms(h, &lw.attn_norm_gain, cfg.norm_eps)).collect();
        let mut q: Vec<Vec<f64>> = normed.iter().map(|x| project(&lw.wq, x)).collect();
        let mut k: Vec<Vec<f64>> = normed.iter().map(|x| project(&lw.wk, x)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| project(&lw.wv, x)).collect();
        for (pos, (qp, kp)) in q.iter_mut().zip(k.iter_mut()).enumerate() {
            qp.chunks_mut(d).for_each(|c| rotate(c, pos, cfg.rope_base));
            kp.chunks_mut(d).for_each(|c| rotate(c, pos, cfg.rope_base));
        }
        for i in 0..tokens.len() {
            let mut context = vec![0.0; cfg.hidden];
            for h in 0..cfg.heads {
                let g = h / group;
                let qh = &q[i][h * d..(h + 1) * d];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| qh.iter().zip(&k[j][g * d..(g + 1) * d]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let peak = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - peak).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    for c in 0..d {
                        context[h * d + c] += e / total * v[j][g * d + c];
                    }
                }
            }
            for (o, a) in hidden[i].iter_mut().zip(project(&lw.wo, &context)) {
                *o += a;
            }
            if let Some(m) = &lw.mlp {
                let up: Vec<f64> = project(&m.up, &rms(&hidden[i], &m.norm_gain, cfg.norm_eps)).into_iter().map(|x| x.max(0.0)).collect();
                for (o, a) in hidden[i].iter_mut().zip(project(&m.down, &up)) {
                    *o += a;
                }
            }
        }
    }
    hidden.iter().map(|h| project(&w.embedding, &rms(h, &w.final_norm_gain, cfg.norm_eps))).collect()
}

pub fn max_abs_diff<A: kvcloak::Scalar, B: kvcloak::Scalar>(a: &[Vec<A>], b: &[Vec<B>]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p.as_f64() - q.as_f64()).abs()))
        .fold(0.0, f64::max)
}
