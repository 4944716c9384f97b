use super::{KvBlock, LayerWeights, ModelConfig, PagedKvCache, Weights};
use crate::error::{Error, Result};
use crate::linalg::Rope;
use crate::scalar::{dot, Scalar};

/// Result of one attention step for a single new token.
#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    /// `D`-vector after the output projection.
    pub output: Vec<T>,
    /// RoPE-rotated key per kv-head, to be appended to the cache.
    pub keys: Vec<Vec<T>>,
    /// Value per kv-head.
    pub values: Vec<Vec<T>>,
    /// Softmax weights per query head over the cached rows (block order,
    /// valid rows only) followed by the new token itself.
    pub weights: Vec<Vec<T>>,
}

pub fn rms_norm<T: Scalar>(x: &[T], gain: &[T], eps: f64) -> Vec<T> {
    let ms = dot(x, x) / T::from_usize(x.len()).expect("length fits");
    let inv = T::one() / (ms + T::from_f64_lossy(eps)).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place<T: Scalar>(scores: &mut [T]) {
    let max = scores.iter().fold(T::neg_infinity(), |m, &s| m.max(s));
    let mut sum = T::zero();
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Decoder-only transformer: pre-RMSNorm attention with RoPE and a residual
/// connection per layer, optional MLP, tied unembedding.
#[derive(Debug, Clone)]
pub struct Model<T> {
    weights: Weights<T>,
    rope: Rope,
}

impl<T: Scalar> Model<T> {
    pub fn new(weights: Weights<T>) -> Result<Self> {
        weights.validate()?;
        let rope = Rope::new(weights.config.head_dim, weights.config.rope_base)?;
        Ok(Self { weights, rope })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &Weights<T> {
        &self.weights
    }

    pub fn into_weights(self) -> Weights<T> {
        self.weights
    }

    pub fn rope(&self) -> &Rope {
        &self.rope
    }

    pub fn new_cache(&self) -> PagedKvCache<T> {
        PagedKvCache::new(self.config())
    }

    fn check_token(&self, token: u32) -> Result<()> {
        if token as usize >= self.config().vocab {
            return Err(Error::InvalidToken { token, vocab: self.config().vocab });
        }
        Ok(())
    }

    fn layer(&self, layer: usize) -> Result<&LayerWeights<T>> {
        self.weights
            .layers
            .get(layer)
            .ok_or_else(|| Error::IndexOutOfRange(format!("layer {layer} of {}", self.config().layers)))
    }

    /// Keys (RoPE applied) and values per kv-head for a normalized input.
    pub fn project_kv(&self, layer: usize, x_normed: &[T], pos: usize) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
        let lw = self.layer(layer)?;
        let d = self.config().head_dim;
        let rot = self.rope.rotation::<T>(pos);
        let k_all = lw.wk.mul_vec(x_normed);
        let v_all = lw.wv.mul_vec(x_normed);
        let keys = k_all
            .chunks(d)
            .map(|k| {
                let mut k = k.to_vec();
                Rope::apply(&mut k, &rot);
                k
            })
            .collect();
        let values = v_all.chunks(d).map(<[T]>::to_vec).collect();
        Ok((keys, values))
    }

    /// One token's attention at `layer` and position `pos` against the rows
    /// already cached for that layer (which must cover positions `< pos`).
    pub fn attention_step(
        &self,
        layer: usize,
        x_normed: &[T],
        pos: usize,
        cache: &PagedKvCache<T>,
    ) -> Result<AttentionOutput<T>> {
        let cfg = self.config();
        if x_normed.len() != cfg.hidden {
            return Err(Error::DimensionMismatch(format!("input of length {} for hidden {}", x_normed.len(), cfg.hidden)));
        }
        for head in 0..cfg.kv_heads {
            let n = cache.len_of(layer, head)?;
            if n != pos {
                return Err(Error::CacheInconsistency(format!(
                    "layer {layer} head {head} caches {n} positions but the step is at position {pos}"
                )));
            }
        }
        let lw = self.layer(layer)?;
        let d = cfg.head_dim;
        let rot = self.rope.rotation::<T>(pos);
        let mut q = lw.wq.mul_vec(x_normed);
        for qh in q.chunks_mut(d) {
            Rope::apply(qh, &rot);
        }
        let (keys, values) = self.project_kv(layer, x_normed, pos)?;
        let scale = T::one() / T::from_usize(d).expect("fits").sqrt();
        let mut context = vec![T::zero(); cfg.hidden];
        let mut weights = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let g = h / cfg.group_size();
            let qh = &q[h * d..(h + 1) * d];
            let blocks: Vec<&KvBlock<T>> = cache.layer_blocks(layer, g)?.collect();
            let mut scores: Vec<T> = Vec::with_capacity(pos + 1);
            for b in &blocks {
                for (k, _) in b.rows() {
                    scores.push(dot(qh, k) * scale);
                }
            }
            scores.push(dot(qh, &keys[g]) * scale);
            softmax_in_place(&mut scores);
            let ctx = &mut context[h * d..(h + 1) * d];
            let mut i = 0;
            for b in &blocks {
                for (_, v) in b.rows() {
                    let a = scores[i];
                    for (c, &x) in ctx.iter_mut().zip(v) {
                        *c += a * x;
                    }
                    i += 1;
                }
            }
            let a = scores[i];
            for (c, &x) in ctx.iter_mut().zip(&values[g]) {
                *c += a * x;
            }
            weights.push(scores);
        }
        let output = lw.wo.mul_vec(&context);
        Ok(AttentionOutput { output, keys, values, weights })
    }

    fn mlp(&self, lw: &LayerWeights<T>, h: &mut [T]) {
        if let Some(m) = &lw.mlp {
            let xn = rms_norm(h, &m.norm_gain, self.config().norm_eps);
            let mut hidden = m.up.mul_vec(&xn);
            for v in &mut hidden {
                *v = v.max(T::zero());
            }
            for (o, d) in h.iter_mut().zip(m.down.mul_vec(&hidden)) {
                *o += d;
            }
        }
    }

    fn embed(&self, token: u32) -> Result<Vec<T>> {
        self.check_token(token)?;
        Ok(self.weights.embedding.row(token as usize).to_vec())
    }

    pub fn logits_from_hidden(&self, h: &[T]) -> Vec<T> {
        let xn = rms_norm(h, &self.weights.final_norm_gain, self.config().norm_eps);
        self.weights.embedding.mul_vec(&xn)
    }

    /// Processes one token at position `cache.seq_len()`, appending its keys
    /// and values to every layer, and returns next-token logits.
    pub fn decode_step(&self, cache: &mut PagedKvCache<T>, token: u32) -> Result<Vec<T>> {
        let pos = cache.seq_len();
        let mut h = self.embed(token)?;
        for (l, lw) in self.weights.layers.iter().enumerate() {
            let xn = rms_norm(&h, &lw.attn_norm_gain, self.config().norm_eps);
            let att = self.attention_step(l, &xn, pos, cache)?;
            for (head, (k, v)) in att.keys.iter().zip(&att.values).enumerate() {
                cache.append(l, head, k, v)?;
            }
            for (o, a) in h.iter_mut().zip(&att.output) {
                *o += *a;
            }
            self.mlp(lw, &mut h);
        }
        cache.advance()?;
        let logits = self.logits_from_hidden(&h);
        cache.set_next_logits(Some(logits.clone()));
        Ok(logits)
    }

    /// Runs `tokens` from an empty cache; returns logits for every position.
    pub fn forward_prefill(&self, tokens: &[u32]) -> Result<(Vec<Vec<T>>, PagedKvCache<T>)> {
        let mut cache = self.new_cache();
        let logits = self.extend(&mut cache, tokens)?;
        Ok((logits, cache))
    }

    /// Appends `tokens` to an existing cache.
    pub fn extend(&self, cache: &mut PagedKvCache<T>, tokens: &[u32]) -> Result<Vec<Vec<T>>> {
        tokens.iter().map(|&t| self.decode_step(cache, t)).collect()
    }

    /// Keys and values `token` would produce at `layer` if appended at
    /// position `cache.seq_len()`. The cache is not modified.
    pub fn probe_kv(&self, cache: &PagedKvCache<T>, token: u32, layer: usize) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
        self.layer(layer)?;
        let pos = cache.seq_len();
        let mut h = self.embed(token)?;
        for (l, lw) in self.weights.layers.iter().enumerate().take(layer) {
            let xn = rms_norm(&h, &lw.attn_norm_gain, self.config().norm_eps);
            let att = self.attention_step(l, &xn, pos, cache)?;
            for (o, a) in h.iter_mut().zip(&att.output) {
                *o += *a;
            }
            self.mlp(lw, &mut h);
        }
        let xn = rms_norm(&h, &self.weights.layers[layer].attn_norm_gain, self.config().norm_eps);
        self.project_kv(layer, &xn, pos)
    }

    /// Greedy decoding of `max_new` tokens, starting from the cache's pending
    /// next-token logits.
    pub fn generate_greedy(&self, cache: &mut PagedKvCache<T>, max_new: usize) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(max_new);
        if max_new == 0 {
            return Ok(out);
        }
        let mut logits = cache
            .next_logits()
            .map(<[T]>::to_vec)
            .ok_or_else(|| Error::CacheInconsistency("cache carries no pending logits to resume from".into()))?;
        for i in 0..max_new {
            let tok = argmax(&logits) as u32;
            out.push(tok);
            if i + 1 < max_new {
                logits = self.decode_step(cache, tok)?;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn small() -> Model<f64> {
        let cfg = ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            kv_heads: 2,
            head_dim: 8,
            vocab: 20,
            block_size: 4,
            ..ModelConfig::toy_mha()
        };
        Model::new(init_weights(&cfg, 5).unwrap()).unwrap()
    }

    #[test]
    fn single_token_attends_only_to_itself() {
        let m = small();
        let cache = m.new_cache();
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).cos()).collect();
        let att = m.attention_step(0, &x, 0, &cache).unwrap();
        for w in &att.weights {
            assert_eq!(w.len(), 1);
            assert!((w[0] - 1.0).abs() < 1e-15);
        }
        // o = v₁ W_oᵀ with the per-head value copied into every query head.
        let v: Vec<f64> = att.values.concat();
        let expected = m.weights().layers[0].wo.mul_vec(&v);
        for (a, b) in att.output.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let m = small();
        let (_, cache) = m.forward_prefill(&[1, 2, 3, 4, 5, 6]).unwrap();
        let x: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let att = m.attention_step(1, &x, 6, &cache).unwrap();
        for w in &att.weights {
            assert_eq!(w.len(), 7);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn position_mismatch_is_reported() {
        let m = small();
        let (_, cache) = m.forward_prefill(&[1, 2]).unwrap();
        let x = vec![0.5; 16];
        assert!(matches!(m.attention_step(0, &x, 5, &cache), Err(Error::CacheInconsistency(_))));
    }

    #[test]
    fn invalid_token_rejected() {
        let m = small();
        assert!(matches!(m.forward_prefill(&[3, 20]), Err(Error::InvalidToken { token: 20, vocab: 20 })));
    }

    #[test]
    fn probe_matches_committed_step() {
        let m = small();
        let (_, mut cache) = m.forward_prefill(&[4, 9, 1]).unwrap();
        let probe = m.probe_kv(&cache, 7, 1).unwrap();
        m.decode_step(&mut cache, 7).unwrap();
        for head in 0..2 {
            let (k, v) = cache.token_kv(1, head, 3).unwrap();
            assert_eq!(k, &probe.0[head][..]);
            assert_eq!(v, &probe.1[head][..]);
        }
    }

    #[test]
    fn greedy_is_deterministic_and_zero_steps_is_empty() {
        let m = small();
        let (_, cache) = m.forward_prefill(&[1, 2, 3]).unwrap();
        let a = m.generate_greedy(&mut cache.clone(), 6).unwrap();
        let b = m.generate_greedy(&mut cache.clone(), 6).unwrap();
        assert_eq!(a, b);
        assert!(m.generate_greedy(&mut cache.clone(), 0).unwrap().is_empty());
    }
}
