//! Appending an instruction to an intercepted cache and letting the model
//! continue.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{BlockState, Model, PagedKvCache};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionOutcome {
    pub tokens: Vec<u32>,
    /// The cache held cloaked or noised blocks, which the attack consumed as
    /// if they were plaintext. The output is then not a plaintext decode.
    pub protected_input: bool,
}

/// Prefills `instruction` on top of a copy of `cache` and greedily decodes
/// `max_new` tokens.
pub fn injection_attack<T: Scalar>(
    cache: &PagedKvCache<T>,
    instruction: &[u32],
    max_new: usize,
    model: &Model<T>,
) -> Result<InjectionOutcome> {
    let protected_input = cache.has_protected_blocks();
    if max_new == 0 {
        return Ok(InjectionOutcome { tokens: Vec::new(), protected_input });
    }
    let mut work = cache.clone();
    for b in work.blocks_mut() {
        b.state = BlockState::Plaintext;
    }
    model.extend(&mut work, instruction)?;
    let tokens = model.generate_greedy(&mut work, max_new)?;
    Ok(InjectionOutcome { tokens, protected_input })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, ModelConfig};

    fn model() -> Model<f64> {
        let cfg = ModelConfig { layers: 2, hidden: 16, heads: 2, kv_heads: 2, head_dim: 8, vocab: 32, block_size: 4, ..ModelConfig::toy_mha() };
        Model::new(init_weights(&cfg, 3).unwrap()).unwrap()
    }

    #[test]
    fn zero_budget_is_empty() {
        let m = model();
        let (_, cache) = m.forward_prefill(&[1, 2, 3]).unwrap();
        assert!(injection_attack(&cache, &[4], 0, &m).unwrap().tokens.is_empty());
    }

    #[test]
    fn empty_instruction_continues_greedy_decode() {
        let m = model();
        let (_, cache) = m.forward_prefill(&[5, 9, 1, 7, 7]).unwrap();
        let out = injection_attack(&cache, &[], 6, &m).unwrap();
        let mut c = cache.clone();
        assert_eq!(out.tokens, m.generate_greedy(&mut c, 6).unwrap());
        assert!(!out.protected_input);
    }
}
