use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DEFAULT_ROPE_BASE;

/// Hyperparameters of the toy decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub rope_base: f64,
    pub block_size: usize,
    pub norm_eps: f64,
    /// Width of the optional MLP block; zero disables it.
    #[serde(default)]
    pub mlp_hidden: usize,
}

impl ModelConfig {
    /// Four-layer multi-head model with 64-wide heads (so block sizes up to 64
    /// can carry per-row identifiers).
    pub fn toy_mha() -> Self {
        Self {
            layers: 4,
            hidden: 128,
            heads: 2,
            kv_heads: 2,
            head_dim: 64,
            vocab: 1024,
            rope_base: DEFAULT_ROPE_BASE,
            block_size: 16,
            norm_eps: 1e-6,
            mlp_hidden: 0,
        }
    }

    /// Grouped-query variant of [`ModelConfig::toy_mha`] with one kv-head.
    pub fn toy_gqa() -> Self {
        Self { kv_heads: 1, ..Self::toy_mha() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layers == 0 || self.vocab == 0 || self.block_size == 0 {
            return bad("layers, vocab and block_size must be positive".into());
        }
        if self.heads == 0 || self.kv_heads == 0 {
            return bad("head counts must be positive".into());
        }
        if self.heads % self.kv_heads != 0 {
            return bad(format!("{} heads cannot be grouped over {} kv-heads", self.heads, self.kv_heads));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return bad(format!("head_dim must be even, got {}", self.head_dim));
        }
        if self.hidden != self.heads * self.head_dim {
            return bad(format!(
                "hidden {} != heads {} x head_dim {}",
                self.hidden, self.heads, self.head_dim
            ));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return bad(format!("rope_base must be positive, got {}", self.rope_base));
        }
        if !(self.norm_eps >= 0.0 && self.norm_eps.is_finite()) {
            return bad(format!("norm_eps must be non-negative, got {}", self.norm_eps));
        }
        Ok(())
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Query heads sharing one kv-head.
    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }

    pub fn is_mha(&self) -> bool {
        self.heads == self.kv_heads
    }

    /// "first", "mid" and "last" layer indices; mid is `⌊L/2⌋`.
    pub fn probe_layers(&self) -> [usize; 3] {
        [0, self.layers / 2, self.layers - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy_mha().validate().unwrap();
        ModelConfig::toy_gqa().validate().unwrap();
        assert!(ModelConfig::toy_mha().is_mha());
        assert_eq!(ModelConfig::toy_gqa().group_size(), 2);
    }

    #[test]
    fn rejects_ungroupable_heads() {
        let cfg = ModelConfig { heads: 3, kv_heads: 2, hidden: 192, ..ModelConfig::toy_mha() };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rejects_inconsistent_hidden() {
        let cfg = ModelConfig { hidden: 100, ..ModelConfig::toy_mha() };
        assert!(cfg.validate().is_err());
    }
}
