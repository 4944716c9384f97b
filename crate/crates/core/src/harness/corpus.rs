//! Synthetic prompt corpora.

use rand::seq::index::sample;
use rand::Rng;

use super::config::{CorpusConfig, CorpusSource};
use crate::error::{Error, Result};
use crate::model::echo::BOS;
use crate::model::Model;
use crate::scalar::Scalar;

/// Draws `config.count` sequences. Model-sampled corpora need `model`.
pub fn generate_corpus<T: Scalar, R: Rng + ?Sized>(
    config: &CorpusConfig,
    vocab: usize,
    model: Option<&Model<T>>,
    rng: &mut R,
) -> Result<Vec<Vec<u32>>> {
    config.validate(vocab)?;
    let mut out = Vec::with_capacity(config.count);
    for _ in 0..config.count {
        let len = rng.random_range(config.min_len..=config.max_len);
        let seq = match config.source {
            CorpusSource::Uniform => (0..len).map(|_| rng.random_range(0..vocab as u32)).collect(),
            CorpusSource::DistinctUniform => {
                let mut seq = vec![BOS];
                seq.extend(sample(rng, vocab - 1, len - 1).into_iter().map(|t| t as u32 + 1));
                seq
            }
            CorpusSource::ModelSampled { temperature } => {
                let model = model.ok_or_else(|| Error::InvalidConfig("model-sampled corpus needs a model".into()))?;
                sample_from_model(model, len, temperature, rng)?
            }
        };
        out.push(seq);
    }
    Ok(out)
}

/// `BOS` then `len − 1` tokens from `softmax(logits / temperature)`, with BOS
/// and the previous token excluded.
pub fn sample_from_model<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    len: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let mut cache = model.new_cache();
    let mut seq = vec![BOS];
    let mut logits = model.decode_step(&mut cache, BOS)?;
    while seq.len() < len {
        let prev = *seq.last().expect("non-empty");
        let allowed = |t: usize| t as u32 != BOS && t as u32 != prev;
        let peak = logits
            .iter()
            .enumerate()
            .filter(|&(t, _)| allowed(t))
            .map(|(_, l)| l.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(t, l)| if allowed(t) { ((l.as_f64() - peak) / temperature).exp() } else { 0.0 })
            .collect();
        let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
        let mut pick = weights.iter().rposition(|&w| w > 0.0).expect("an allowed token");
        for (t, &w) in weights.iter().enumerate() {
            if u < w {
                pick = t;
                break;
            }
            u -= w;
        }
        seq.push(pick as u32);
        if seq.len() < len {
            logits = model.decode_step(&mut cache, pick as u32)?;
        }
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Model<f32> {
        let cfg = ModelConfig { layers: 1, vocab: 50, ..ModelConfig::toy_mha() };
        Model::new(init_weights(&cfg, 3).unwrap().cast()).unwrap()
    }

    #[test]
    fn empty_and_deterministic() {
        let cfg = CorpusConfig { count: 0, ..CorpusConfig::default() };
        assert!(generate_corpus::<f32, _>(&cfg, 50, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().is_empty());
        let m = small();
        let cfg = CorpusConfig { count: 3, min_len: 5, max_len: 9, ..CorpusConfig::default() };
        let a = generate_corpus(&cfg, 50, Some(&m), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = generate_corpus(&cfg, 50, Some(&m), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!((5..=9).contains(&s.len()));
            assert_eq!(s[0], BOS);
            assert!(s[1..].iter().all(|&t| t != BOS && t < 50));
            assert!(s.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn uniform_sources_stay_in_vocabulary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for source in [CorpusSource::Uniform, CorpusSource::DistinctUniform] {
            let cfg = CorpusConfig { count: 5, min_len: 20, max_len: 40, source };
            for s in generate_corpus::<f32, _>(&cfg, 64, None, &mut rng).unwrap() {
                assert!(s.iter().all(|&t| t < 64));
                if source == CorpusSource::DistinctUniform {
                    let mut u = s.clone();
                    u.sort_unstable();
                    u.dedup();
                    assert_eq!(u.len(), s.len());
                }
            }
        }
    }

    #[test]
    fn model_source_requires_a_model() {
        let cfg = CorpusConfig { count: 1, ..CorpusConfig::default() };
        assert!(generate_corpus::<f32, _>(&cfg, 50, None, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }
}
