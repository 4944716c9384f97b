mod common;

use common::{max_abs_diff, random_tokens, reference_logits, rng, small_config, weights};
use kvcloak::model::{Model, ModelConfig};

fn check(cfg: &ModelConfig, seed: u64, len: usize) {
    let w = weights(cfg, seed);
    let tokens = random_tokens(&mut rng(seed + 100), cfg.vocab, len);
    let expected = reference_logits(&w, &tokens);

    let (logits64, cache) = Model::new(w.clone()).unwrap().forward_prefill(&tokens).unwrap();
    assert!(max_abs_diff(&logits64, &expected) <= 1e-10);
    assert_eq!(cache.seq_len(), len);

    let (logits32, _) = Model::new(w.cast::<f32>()).unwrap().forward_prefill(&tokens).unwrap();
    assert!(max_abs_diff(&logits32, &expected) <= 1e-4);
}

#[test]
fn cached_forward_matches_full_recompute() {
    check(&small_config(), 1, 11);
}

#[test]
fn grouped_query_attention_matches_reference() {
    let cfg = ModelConfig { heads: 4, kv_heads: 2, head_dim: 8, ..small_config() };
    check(&cfg, 2, 9);
}

#[test]
fn mlp_layers_match_reference() {
    let cfg = ModelConfig { mlp_hidden: 48, ..small_config() };
    check(&cfg, 3, 10);
}

#[test]
fn toy_presets_match_reference() {
    check(&ModelConfig::toy_mha(), 4, 20);
    check(&ModelConfig::toy_gqa(), 5, 17);
}

#[test]
fn decoding_in_pieces_equals_prefill() {
    let cfg = small_config();
    let model = Model::new(weights(&cfg, 6)).unwrap();
    let tokens = random_tokens(&mut rng(7), cfg.vocab, 13);
    let (full, full_cache) = model.forward_prefill(&tokens).unwrap();
    let (mut head, mut cache) = model.forward_prefill(&tokens[..5]).unwrap();
    head.extend(model.extend(&mut cache, &tokens[5..]).unwrap());
    assert_eq!(head, full);
    assert_eq!(cache.blocks(), full_cache.blocks());
}
