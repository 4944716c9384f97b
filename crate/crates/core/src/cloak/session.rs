//! Whole-cache cloaking and a serving session that keeps its cache cloaked
//! at rest between decode steps.

use rand::Rng;

use super::block::{
    deobfuscate_block, deobfuscate_block_unfused, obfuscate_block, obfuscate_block_unfused, Deobfuscated,
};
use super::fusion::{fuse_weights, FusedWeights};
use super::key::{keygen, CloakKey, KeyMaterial, KeyParams};
use crate::error::{Error, Result};
use crate::model::{BlockState, KvBlock, Model, PagedKvCache, Weights};
use crate::scalar::Scalar;

/// Row order of a de-cloaked cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RowOrder {
    /// One-time permuted order; attention consumes it as is.
    #[default]
    Permuted,
    /// Original slot order, so the block table addresses tokens again.
    Original,
}

/// Where the secret column transforms are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloakPath {
    /// Cache produced by fused weights; only `S`, `P̂` and `A` run online.
    Fused,
    /// Plaintext cache; `M1`/`M2` are multiplied in online.
    Unfused,
}

fn cloak_one<T: Scalar>(
    block: &KvBlock<T>,
    key: &CloakKey,
    id: usize,
    epoch: u64,
    path: CloakPath,
) -> Result<KvBlock<T>> {
    let mut rng = key.block_stream(block.layer, block.head, id, epoch);
    match path {
        CloakPath::Fused => obfuscate_block(block, key, &mut rng),
        CloakPath::Unfused => obfuscate_block_unfused(block, key, &mut rng),
    }
}

fn decloak_one<T: Scalar>(block: &KvBlock<T>, key: &CloakKey, path: CloakPath, order: RowOrder) -> Result<KvBlock<T>> {
    let Deobfuscated { mut block, slot_map } = match path {
        CloakPath::Fused => deobfuscate_block(block, key)?,
        CloakPath::Unfused => deobfuscate_block_unfused(block, key)?,
    };
    block.state = BlockState::Plaintext;
    if order == RowOrder::Original {
        block.permute_valid_rows(&slot_map.inverse())?;
    }
    Ok(block)
}

/// Cloaks every block, drawing each block's permutation from its
/// `(layer, head, block id, epoch)` stream. Pending logits are dropped.
pub fn cloak_cache<T: Scalar>(cache: &PagedKvCache<T>, key: &CloakKey, epoch: u64) -> Result<PagedKvCache<T>> {
    cloak_cache_with(cache, key, epoch, CloakPath::Fused)
}

pub fn cloak_cache_with<T: Scalar>(
    cache: &PagedKvCache<T>,
    key: &CloakKey,
    epoch: u64,
    path: CloakPath,
) -> Result<PagedKvCache<T>> {
    let mut out = cache.clone();
    out.set_next_logits(None);
    for (id, block) in out.blocks_mut().iter_mut().enumerate() {
        *block = cloak_one(block, key, id, epoch, path)?;
    }
    Ok(out)
}

pub fn decloak_cache<T: Scalar>(cache: &PagedKvCache<T>, key: &CloakKey, order: RowOrder) -> Result<PagedKvCache<T>> {
    decloak_cache_with(cache, key, order, CloakPath::Fused)
}

pub fn decloak_cache_with<T: Scalar>(
    cache: &PagedKvCache<T>,
    key: &CloakKey,
    order: RowOrder,
    path: CloakPath,
) -> Result<PagedKvCache<T>> {
    let mut out = cache.clone();
    for block in out.blocks_mut() {
        *block = decloak_one(block, key, path, order)?;
    }
    out.validate()?;
    Ok(out)
}

/// Samples key material, fuses it into `weights` and calibrates θ on the
/// fused model's caches of `corpus`.
pub fn provision<T: Scalar, R: Rng + ?Sized>(
    weights: &Weights<T>,
    corpus: &[Vec<u32>],
    params: &KeyParams,
    rng: &mut R,
) -> Result<(CloakKey, FusedWeights<T>)> {
    let cfg = &weights.config;
    let key_layers = match params.scope {
        super::key::KeyScope::Global => 1,
        super::key::KeyScope::PerLayer => cfg.layers,
    };
    let material = KeyMaterial::sample(cfg.block_size, cfg.head_dim, key_layers, params, rng)?;
    let fused = fuse_weights(weights, &material)?;
    let key = calibrate(&material, &fused, corpus, rng)?;
    Ok((key, fused))
}

/// Finishes `material` on caches of `corpus` produced by `fused`.
pub fn calibrate<T: Scalar, R: Rng + ?Sized>(
    material: &KeyMaterial,
    fused: &FusedWeights<T>,
    corpus: &[Vec<u32>],
    rng: &mut R,
) -> Result<CloakKey> {
    let model = Model::new(fused.as_weights().clone())?;
    let mut blocks = Vec::new();
    for seq in corpus {
        let (_, cache) = model.forward_prefill(seq)?;
        blocks.extend(cache.blocks().iter().cloned());
    }
    keygen(material, &blocks, rng)
}

/// Serving loop over a fused model whose cache is cloaked between steps.
/// Each step de-cloaks into a working copy, decodes, and re-cloaks the
/// blocks that received a token under a fresh epoch.
#[derive(Debug, Clone)]
pub struct ProtectedSession<T> {
    model: Model<T>,
    key: CloakKey,
    cache: PagedKvCache<T>,
    epochs: Vec<u64>,
    logits: Option<Vec<T>>,
}

impl<T: Scalar> ProtectedSession<T> {
    pub fn new(fused: FusedWeights<T>, key: CloakKey) -> Result<Self> {
        let model = Model::new(fused.into_weights())?;
        if model.config().block_size != key.block_size || model.config().head_dim != key.head_dim {
            return Err(Error::Key(format!(
                "key for block {}x{}, model uses {}x{}",
                key.block_size,
                key.head_dim,
                model.config().block_size,
                model.config().head_dim
            )));
        }
        let cache = model.new_cache();
        Ok(Self { model, key, cache, epochs: Vec::new(), logits: None })
    }

    /// Cloaked cache as stored at rest.
    pub fn cache(&self) -> &PagedKvCache<T> {
        &self.cache
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn key(&self) -> &CloakKey {
        &self.key
    }

    pub fn seq_len(&self) -> usize {
        self.cache.seq_len()
    }

    /// Logits for the token after the last processed one.
    pub fn next_logits(&self) -> Option<&[T]> {
        self.logits.as_deref()
    }

    /// Appends `tokens`, returning logits after each.
    pub fn extend(&mut self, tokens: &[u32]) -> Result<Vec<Vec<T>>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let before: Vec<usize> = self.cache.blocks().iter().map(|b| b.fill).collect();
        let mut working = decloak_cache(&self.cache, &self.key, RowOrder::Permuted)?;
        let logits = self.model.extend(&mut working, tokens)?;
        self.logits = working.next_logits().map(<[T]>::to_vec);
        working.set_next_logits(None);
        for (id, block) in working.blocks_mut().iter_mut().enumerate() {
            if before.get(id) == Some(&block.fill) {
                *block = self.cache.blocks()[id].clone();
                continue;
            }
            let epoch = match self.epochs.get_mut(id) {
                Some(e) => {
                    *e += 1;
                    *e
                }
                None => {
                    self.epochs.push(0);
                    0
                }
            };
            *block = cloak_one(block, &self.key, id, epoch, CloakPath::Fused)?;
        }
        self.cache = working;
        Ok(logits)
    }

    pub fn decode_step(&mut self, token: u32) -> Result<Vec<T>> {
        let mut logits = self.extend(&[token])?;
        Ok(logits.pop().expect("one token decoded"))
    }

    /// Greedy continuation from the pending logits.
    pub fn generate_greedy(&mut self, max_new: usize) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(max_new);
        for i in 0..max_new {
            let logits = self
                .logits
                .as_deref()
                .ok_or_else(|| Error::CacheInconsistency("session has no pending logits".into()))?;
            let tok = crate::model::argmax(logits) as u32;
            out.push(tok);
            if i + 1 < max_new {
                self.decode_step(tok)?;
            }
        }
        Ok(out)
    }
}
