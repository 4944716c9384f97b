use crate::error::{Error, Result};
use crate::model::KvBlock;
use crate::scalar::Scalar;

/// Per-position key and value rows of one layer, concatenated over kv-heads
/// and widened to `f64`. Blocks of each head are read in the order given,
/// which is the logical order produced by `extract_layer_kv`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSlices {
    pub kv_heads: usize,
    pub head_dim: usize,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl LayerSlices {
    pub fn from_blocks<T: Scalar>(blocks: &[KvBlock<T>]) -> Result<Self> {
        let first = blocks.first().ok_or_else(|| Error::InvalidConfig("no cache blocks to attack".into()))?;
        let head_dim = first.head_dim();
        let kv_heads = blocks.iter().map(|b| b.head).max().unwrap_or(0) + 1;
        let mut per_head: Vec<Vec<(&[T], &[T])>> = vec![Vec::new(); kv_heads];
        for b in blocks {
            if b.head_dim() != head_dim || b.layer != first.layer {
                return Err(Error::DimensionMismatch("blocks from different layers or shapes".into()));
            }
            per_head[b.head].extend(b.rows());
        }
        let n = per_head[0].len();
        if per_head.iter().any(|h| h.len() != n) {
            return Err(Error::CacheInconsistency("kv-heads hold different token counts".into()));
        }
        let widen = |i: usize, keys: bool| -> Vec<f64> {
            per_head
                .iter()
                .flat_map(|h| if keys { h[i].0 } else { h[i].1 })
                .map(|x| x.as_f64())
                .collect()
        };
        let keys = (0..n).map(|i| widen(i, true)).collect();
        let values = (0..n).map(|i| widen(i, false)).collect();
        Ok(Self { kv_heads, head_dim, keys, values })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}
