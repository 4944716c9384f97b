//! Paged key/value cache: fixed-size blocks per (layer, kv-head) and a block
//! table mapping logical positions to `(block id, slot)`.

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Permutation};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockState {
    Plaintext,
    Cloaked,
    DpNoised,
}

/// Keys and values of one attention kv-head for up to `b` tokens.
/// Rows `>= fill` are padding and never attended to.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock<T> {
    pub layer: usize,
    pub head: usize,
    /// `b × d`
    pub keys: Matrix<T>,
    /// `b × d`
    pub values: Matrix<T>,
    pub fill: usize,
    pub state: BlockState,
}

impl<T: Scalar> KvBlock<T> {
    pub fn empty(layer: usize, head: usize, block_size: usize, head_dim: usize) -> Self {
        Self {
            layer,
            head,
            keys: Matrix::zeros(block_size, head_dim),
            values: Matrix::zeros(block_size, head_dim),
            fill: 0,
            state: BlockState::Plaintext,
        }
    }

    pub fn block_size(&self) -> usize {
        self.keys.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn is_full(&self) -> bool {
        self.fill == self.block_size()
    }

    /// Valid `(key, value)` rows.
    pub fn rows(&self) -> impl Iterator<Item = (&[T], &[T])> {
        (0..self.fill).map(move |r| (self.keys.row(r), self.values.row(r)))
    }

    fn push(&mut self, key: &[T], value: &[T]) -> Result<()> {
        if self.is_full() {
            return Err(Error::CacheInconsistency("append to a full block".into()));
        }
        if self.state == BlockState::Cloaked {
            return Err(Error::BlockState("cannot append to a cloaked block".into()));
        }
        if key.len() != self.head_dim() || value.len() != self.head_dim() {
            return Err(Error::DimensionMismatch(format!(
                "row of length {}/{} for head_dim {}",
                key.len(),
                value.len(),
                self.head_dim()
            )));
        }
        let r = self.fill;
        self.keys.row_mut(r).copy_from_slice(key);
        self.values.row_mut(r).copy_from_slice(value);
        self.fill += 1;
        Ok(())
    }

    /// Reorders the valid rows of keys and values by the same permutation.
    pub fn permute_valid_rows(&mut self, perm: &Permutation) -> Result<()> {
        if perm.len() != self.fill {
            return Err(Error::DimensionMismatch(format!(
                "permutation of size {} for {} valid rows",
                perm.len(),
                self.fill
            )));
        }
        let d = self.head_dim();
        let valid_k = Matrix::new(self.fill, d, self.keys.data()[..self.fill * d].to_vec())?;
        let valid_v = Matrix::new(self.fill, d, self.values.data()[..self.fill * d].to_vec())?;
        let pk = perm.apply_rows(&valid_k)?;
        let pv = perm.apply_rows(&valid_v)?;
        self.keys.data_mut()[..self.fill * d].copy_from_slice(pk.data());
        self.values.data_mut()[..self.fill * d].copy_from_slice(pv.data());
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> KvBlock<U> {
        KvBlock {
            layer: self.layer,
            head: self.head,
            keys: self.keys.cast(),
            values: self.values.cast(),
            fill: self.fill,
            state: self.state,
        }
    }
}

/// Paged cache for every layer and kv-head of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PagedKvCache<T> {
    pub(crate) layers: usize,
    pub(crate) kv_heads: usize,
    pub(crate) head_dim: usize,
    pub(crate) block_size: usize,
    pub(crate) blocks: Vec<KvBlock<T>>,
    /// Indexed by `layer * kv_heads + head`; logical block → block id.
    pub(crate) table: Vec<Vec<usize>>,
    /// Tokens written per (layer, head) list, indexed like `table`.
    pub(crate) lens: Vec<usize>,
    pub(crate) seq_len: usize,
    /// Next-token logits of the last processed position, kept as serving
    /// state so generation can resume from the cache alone.
    pub(crate) next_logits: Option<Vec<T>>,
}

impl<T: Scalar> PagedKvCache<T> {
    pub fn new(config: &ModelConfig) -> Self {
        Self::with_layout(config.layers, config.kv_heads, config.head_dim, config.block_size)
    }

    pub fn with_layout(layers: usize, kv_heads: usize, head_dim: usize, block_size: usize) -> Self {
        Self {
            layers,
            kv_heads,
            head_dim,
            block_size,
            blocks: Vec::new(),
            table: vec![Vec::new(); layers * kv_heads],
            lens: vec![0; layers * kv_heads],
            seq_len: 0,
            next_logits: None,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
    pub fn layers(&self) -> usize {
        self.layers
    }
    pub fn kv_heads(&self) -> usize {
        self.kv_heads
    }
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }
    pub fn block_size(&self) -> usize {
        self.block_size
    }
    pub fn blocks(&self) -> &[KvBlock<T>] {
        &self.blocks
    }
    pub fn blocks_mut(&mut self) -> &mut [KvBlock<T>] {
        &mut self.blocks
    }
    pub fn next_logits(&self) -> Option<&[T]> {
        self.next_logits.as_deref()
    }
    pub fn set_next_logits(&mut self, logits: Option<Vec<T>>) {
        self.next_logits = logits;
    }

    fn slot_index(&self, layer: usize, head: usize) -> Result<usize> {
        if layer >= self.layers {
            return Err(Error::IndexOutOfRange(format!("layer {layer} of {}", self.layers)));
        }
        if head >= self.kv_heads {
            return Err(Error::IndexOutOfRange(format!("kv-head {head} of {}", self.kv_heads)));
        }
        Ok(layer * self.kv_heads + head)
    }

    /// Block ids holding `(layer, head)` in logical order.
    pub fn block_ids(&self, layer: usize, head: usize) -> Result<&[usize]> {
        Ok(&self.table[self.slot_index(layer, head)?])
    }

    pub fn layer_blocks(&self, layer: usize, head: usize) -> Result<impl Iterator<Item = &KvBlock<T>>> {
        Ok(self.block_ids(layer, head)?.iter().map(move |&id| &self.blocks[id]))
    }

    /// Tokens currently stored for `(layer, head)`; equals `seq_len` between
    /// decode steps.
    pub fn len_of(&self, layer: usize, head: usize) -> Result<usize> {
        Ok(self.lens[self.slot_index(layer, head)?])
    }

    /// Physical location of logical position `pos`.
    pub fn locate(&self, layer: usize, head: usize, pos: usize) -> Result<(usize, usize)> {
        let idx = self.slot_index(layer, head)?;
        if pos >= self.lens[idx] {
            return Err(Error::IndexOutOfRange(format!("position {pos} of {}", self.lens[idx])));
        }
        Ok((self.table[idx][pos / self.block_size], pos % self.block_size))
    }

    /// Key and value rows stored at the physical slot of `pos`.
    pub fn token_kv(&self, layer: usize, head: usize, pos: usize) -> Result<(&[T], &[T])> {
        let (id, slot) = self.locate(layer, head, pos)?;
        let b = &self.blocks[id];
        Ok((b.keys.row(slot), b.values.row(slot)))
    }

    /// Appends one token's key and value for `(layer, head)`, allocating a
    /// new block when the current one is full.
    pub fn append(&mut self, layer: usize, head: usize, key: &[T], value: &[T]) -> Result<()> {
        let idx = self.slot_index(layer, head)?;
        if self.lens[idx] != self.seq_len {
            return Err(Error::CacheInconsistency(format!(
                "layer {layer} head {head} already holds {} tokens at sequence length {}",
                self.lens[idx], self.seq_len
            )));
        }
        let needs_block = self.table[idx].last().map_or(true, |&id| self.blocks[id].is_full());
        if needs_block {
            self.blocks.push(KvBlock::empty(layer, head, self.block_size, self.head_dim));
            let id = self.blocks.len() - 1;
            self.table[idx].push(id);
        }
        let id = *self.table[idx].last().expect("block allocated");
        self.blocks[id].push(key, value)?;
        self.lens[idx] += 1;
        Ok(())
    }

    /// Commits a position once every layer and head has been appended.
    pub fn advance(&mut self) -> Result<()> {
        if let Some(i) = self.lens.iter().position(|&n| n != self.seq_len + 1) {
            return Err(Error::CacheInconsistency(format!(
                "layer {} head {} holds {} tokens, expected {}",
                i / self.kv_heads,
                i % self.kv_heads,
                self.lens[i],
                self.seq_len + 1
            )));
        }
        self.seq_len += 1;
        Ok(())
    }

    /// Copies the blocks of `layer` for every kv-head, in logical order.
    pub fn extract_layer_kv(&self, layer: usize) -> Result<Vec<KvBlock<T>>> {
        if layer >= self.layers {
            return Err(Error::IndexOutOfRange(format!("layer {layer} of {}", self.layers)));
        }
        let mut out = Vec::new();
        for head in 0..self.kv_heads {
            out.extend(self.layer_blocks(layer, head)?.cloned());
        }
        Ok(out)
    }

    /// Checks the block table against the block contents.
    pub fn validate(&self) -> Result<()> {
        let mut owner = vec![None; self.blocks.len()];
        for layer in 0..self.layers {
            for head in 0..self.kv_heads {
                let idx = layer * self.kv_heads + head;
                let ids = &self.table[idx];
                let expected_blocks = self.lens[idx].div_ceil(self.block_size);
                if ids.len() != expected_blocks {
                    return Err(Error::CacheInconsistency(format!(
                        "layer {layer} head {head}: {} blocks for {} tokens",
                        ids.len(),
                        self.lens[idx]
                    )));
                }
                for (i, &id) in ids.iter().enumerate() {
                    let b = self.blocks.get(id).ok_or_else(|| {
                        Error::CacheInconsistency(format!("block id {id} out of range"))
                    })?;
                    if owner[id].replace((layer, head)).is_some() {
                        return Err(Error::CacheInconsistency(format!("block {id} referenced twice")));
                    }
                    if b.layer != layer || b.head != head {
                        return Err(Error::CacheInconsistency(format!("block {id} belongs elsewhere")));
                    }
                    let expect_fill =
                        if i + 1 < ids.len() { self.block_size } else { self.lens[idx] - i * self.block_size };
                    if b.fill != expect_fill {
                        return Err(Error::CacheInconsistency(format!(
                            "block {id} fill {} expected {expect_fill}",
                            b.fill
                        )));
                    }
                    if b.keys.shape() != (self.block_size, self.head_dim)
                        || b.values.shape() != (self.block_size, self.head_dim)
                    {
                        return Err(Error::CacheInconsistency(format!("block {id} has the wrong shape")));
                    }
                }
                if self.lens[idx] != self.seq_len {
                    return Err(Error::CacheInconsistency(format!(
                        "layer {layer} head {head} holds {} of {} tokens",
                        self.lens[idx], self.seq_len
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> PagedKvCache<U> {
        PagedKvCache {
            layers: self.layers,
            kv_heads: self.kv_heads,
            head_dim: self.head_dim,
            block_size: self.block_size,
            blocks: self.blocks.iter().map(KvBlock::cast).collect(),
            table: self.table.clone(),
            lens: self.lens.clone(),
            seq_len: self.seq_len,
            next_logits: self
                .next_logits
                .as_ref()
                .map(|v| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect()),
        }
    }

    /// True when any block is not plaintext.
    pub fn has_protected_blocks(&self) -> bool {
        self.blocks.iter().any(|b| b.state != BlockState::Plaintext)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache(b: usize) -> PagedKvCache<f32> {
        PagedKvCache::with_layout(2, 2, 4, b)
    }

    fn push_token(c: &mut PagedKvCache<f32>, v: f32) {
        for l in 0..2 {
            for h in 0..2 {
                c.append(l, h, &[v; 4], &[-v; 4]).unwrap();
            }
        }
        c.advance().unwrap();
    }

    #[test]
    fn paging_arithmetic() {
        let mut c = cache(4);
        for t in 0..10 {
            push_token(&mut c, t as f32);
        }
        c.validate().unwrap();
        for l in 0..2 {
            assert_eq!(c.extract_layer_kv(l).unwrap().len(), 2 * 10usize.div_ceil(4));
        }
        let (id, slot) = c.locate(1, 1, 9).unwrap();
        assert_eq!(slot, 1);
        assert_eq!(c.blocks()[id].keys.row(1), &[9.0; 4]);
        assert_eq!(c.token_kv(0, 0, 5).unwrap().1, &[-5.0; 4]);
    }

    #[test]
    fn block_table_is_injective() {
        let mut c = cache(2);
        for t in 0..5 {
            push_token(&mut c, t as f32);
        }
        let mut ids: Vec<usize> = c.table.iter().flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), c.blocks().len());
    }

    #[test]
    fn extract_rejects_missing_layer() {
        let c = cache(4);
        assert!(matches!(c.extract_layer_kv(2), Err(Error::IndexOutOfRange(_))));
    }

    #[test]
    fn append_out_of_order_is_inconsistent() {
        let mut c = cache(4);
        c.append(0, 0, &[1.0; 4], &[1.0; 4]).unwrap();
        assert!(matches!(c.append(0, 0, &[1.0; 4], &[1.0; 4]), Err(Error::CacheInconsistency(_))));
        assert!(matches!(c.advance(), Err(Error::CacheInconsistency(_))));
    }

    #[test]
    fn permute_valid_rows_moves_keys_and_values_together() {
        let mut c = cache(4);
        for t in 0..3 {
            push_token(&mut c, t as f32);
        }
        let id = c.block_ids(0, 0).unwrap()[0];
        let perm = Permutation::from_mapping(vec![2, 0, 1]).unwrap();
        c.blocks_mut()[id].permute_valid_rows(&perm).unwrap();
        let b = &c.blocks()[id];
        assert_eq!(b.keys.row(0), &[2.0; 4]);
        assert_eq!(b.values.row(0), &[-2.0; 4]);
        assert_eq!(b.keys.row(3), &[0.0; 4]);
    }
}
