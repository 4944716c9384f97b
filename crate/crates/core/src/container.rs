//! Binary container shared by weight, cache and key files.
//!
//! Layout:
//!
//! | bytes            | content                                              |
//! |------------------|------------------------------------------------------|
//! | 0..8             | magic `KVCLK001`                                     |
//! | 8..16            | header length `n` as little-endian `u64`             |
//! | 16..16+n         | UTF-8 JSON header                                    |
//! | 16+n..           | array payloads, little-endian, in header order       |
//!
//! The header is `{"format": 1, "kind": ..., "meta": ..., "arrays": [...]}`
//! where each array entry is `{"name", "dtype", "shape"}` and `dtype` is one
//! of `f32`, `f64`, `u64`. Payload sizes follow from the shapes; trailing
//! bytes are an error.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{BlockState, KvBlock, LayerWeights, MlpWeights, ModelConfig, PagedKvCache, Weights};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"KVCLK001";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    pub fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::U64(_) => "u64",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn from_scalars<T: Scalar>(name: impl Into<String>, shape: Vec<usize>, data: &[T]) -> Self {
        let data = match T::DTYPE {
            "f32" => ArrayData::F32(data.iter().map(|x| x.as_f64() as f32).collect()),
            _ => ArrayData::F64(data.iter().map(|x| x.as_f64()).collect()),
        };
        Self { name: name.into(), shape, data }
    }

    pub fn from_matrix<T: Scalar>(name: impl Into<String>, m: &Matrix<T>) -> Self {
        Self::from_scalars(name, vec![m.rows(), m.cols()], m.data())
    }

    /// Elements converted to `T`; errors if the stored dtype differs.
    pub fn to_scalars<T: Scalar>(&self) -> Result<Vec<T>> {
        match (&self.data, T::DTYPE) {
            (ArrayData::F32(v), "f32") => Ok(v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect()),
            (ArrayData::F64(v), "f64") => Ok(v.iter().map(|&x| T::from_f64_lossy(x)).collect()),
            (d, want) => Err(Error::InvalidConfig(format!(
                "array {} holds {} but {want} was requested",
                self.name,
                d.dtype()
            ))),
        }
    }

    pub fn to_matrix<T: Scalar>(&self) -> Result<Matrix<T>> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidDimension(format!("array {} is not two-dimensional", self.name)));
        }
        Matrix::new(self.shape[0], self.shape[1], self.to_scalars()?)
    }

    pub fn as_u64(&self) -> Result<&[u64]> {
        match &self.data {
            ArrayData::U64(v) => Ok(v),
            d => Err(Error::InvalidConfig(format!("array {} holds {}, expected u64", self.name, d.dtype()))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    kind: String,
    meta: Value,
    arrays: Vec<ArrayHeader>,
}

/// A decoded container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<Array>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self { kind: kind.into(), meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, array: Array) {
        self.arrays.push(array);
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("{} file has no array {name}", self.kind)))
    }

    /// Dtype of the first floating-point array, if any.
    pub fn float_dtype(&self) -> Option<&'static str> {
        self.arrays.iter().map(|a| a.data.dtype()).find(|d| *d != "u64")
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::InvalidConfig(format!("expected a {kind} file, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayHeader { name: a.name.clone(), dtype: a.data.dtype().into(), shape: a.shape.clone() })
                .collect(),
        };
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::DimensionMismatch(format!("array {} shape {:?}", a.name, a.shape)));
            }
        }
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, message: String| Error::Parse { offset, message };
        if bytes.len() < 16 {
            return Err(parse(bytes.len(), "file shorter than the fixed preamble".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(parse(0, "bad magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| parse(8, format!("header length {header_len} exceeds file size {}", bytes.len())))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| parse(16 + e.column().saturating_sub(1), format!("invalid header: {e}")))?;
        if header.format != FORMAT_VERSION {
            return Err(parse(16, format!("unsupported format version {}", header.format)));
        }
        let mut offset = header_end;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for ah in header.arrays {
            let count = ah
                .shape
                .iter()
                .try_fold(1usize, |acc, &s| acc.checked_mul(s))
                .ok_or_else(|| parse(offset, format!("array {} shape overflows", ah.name)))?;
            let width = match ah.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                "u64" => 8,
                other => return Err(parse(offset, format!("array {} has unknown dtype {other}", ah.name))),
            };
            let size = count
                .checked_mul(width)
                .filter(|&s| offset + s <= bytes.len())
                .ok_or_else(|| parse(offset, format!("payload of array {} is truncated", ah.name)))?;
            let raw = &bytes[offset..offset + size];
            let data = match width {
                4 => ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
                _ if ah.dtype == "f64" => {
                    ArrayData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect())
                }
                _ => ArrayData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8"))).collect()),
            };
            if let ArrayData::F32(v) = &data {
                if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                    return Err(parse(offset + 4 * i, format!("non-finite value in array {}", ah.name)));
                }
            }
            if let ArrayData::F64(v) = &data {
                if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                    return Err(parse(offset + 8 * i, format!("non-finite value in array {}", ah.name)));
                }
            }
            arrays.push(Array { name: ah.name, shape: ah.shape, data });
            offset += size;
        }
        if offset != bytes.len() {
            return Err(parse(offset, format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self { kind: header.kind, meta: header.meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    let v = meta.get(key).ok_or_else(|| Error::InvalidConfig(format!("header meta lacks {key}")))?;
    Ok(serde_json::from_value(v.clone())?)
}

impl<T: Scalar> Weights<T> {
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("weights", serde_json::json!({ "config": self.config }));
        let d = self.config.hidden;
        c.push(Array::from_matrix("embedding", &self.embedding));
        c.push(Array::from_scalars("final_norm_gain", vec![d], &self.final_norm_gain));
        for (l, lw) in self.layers.iter().enumerate() {
            c.push(Array::from_matrix(format!("layers.{l}.wq"), &lw.wq));
            c.push(Array::from_matrix(format!("layers.{l}.wk"), &lw.wk));
            c.push(Array::from_matrix(format!("layers.{l}.wv"), &lw.wv));
            c.push(Array::from_matrix(format!("layers.{l}.wo"), &lw.wo));
            c.push(Array::from_scalars(format!("layers.{l}.attn_norm_gain"), vec![d], &lw.attn_norm_gain));
            if let Some(m) = &lw.mlp {
                c.push(Array::from_scalars(format!("layers.{l}.mlp.norm_gain"), vec![d], &m.norm_gain));
                c.push(Array::from_matrix(format!("layers.{l}.mlp.up"), &m.up));
                c.push(Array::from_matrix(format!("layers.{l}.mlp.down"), &m.down));
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("weights")?;
        let config: ModelConfig = meta_field(&c.meta, "config")?;
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mlp = if config.mlp_hidden > 0 {
                Some(MlpWeights {
                    norm_gain: c.get(&format!("layers.{l}.mlp.norm_gain"))?.to_scalars()?,
                    up: c.get(&format!("layers.{l}.mlp.up"))?.to_matrix()?,
                    down: c.get(&format!("layers.{l}.mlp.down"))?.to_matrix()?,
                })
            } else {
                None
            };
            layers.push(LayerWeights {
                wq: c.get(&format!("layers.{l}.wq"))?.to_matrix()?,
                wk: c.get(&format!("layers.{l}.wk"))?.to_matrix()?,
                wv: c.get(&format!("layers.{l}.wv"))?.to_matrix()?,
                wo: c.get(&format!("layers.{l}.wo"))?.to_matrix()?,
                attn_norm_gain: c.get(&format!("layers.{l}.attn_norm_gain"))?.to_scalars()?,
                mlp,
            });
        }
        let w = Weights {
            config,
            embedding: c.get("embedding")?.to_matrix()?,
            layers,
            final_norm_gain: c.get("final_norm_gain")?.to_scalars()?,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct BlockMeta {
    layer: usize,
    head: usize,
    fill: usize,
    state: BlockState,
}

impl<T: Scalar> PagedKvCache<T> {
    pub fn to_container(&self) -> Result<Container> {
        let blocks: Vec<BlockMeta> = self
            .blocks
            .iter()
            .map(|b| BlockMeta { layer: b.layer, head: b.head, fill: b.fill, state: b.state })
            .collect();
        let meta = serde_json::json!({
            "layers": self.layers,
            "kv_heads": self.kv_heads,
            "head_dim": self.head_dim,
            "block_size": self.block_size,
            "seq_len": self.seq_len,
            "lens": self.lens,
            "table": self.table,
            "blocks": blocks,
        });
        let mut c = Container::new("cache", meta);
        for (i, b) in self.blocks.iter().enumerate() {
            c.push(Array::from_matrix(format!("blocks.{i}.keys"), &b.keys));
            c.push(Array::from_matrix(format!("blocks.{i}.values"), &b.values));
        }
        if let Some(l) = &self.next_logits {
            c.push(Array::from_scalars("next_logits", vec![l.len()], l));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("cache")?;
        let metas: Vec<BlockMeta> = meta_field(&c.meta, "blocks")?;
        let mut blocks = Vec::with_capacity(metas.len());
        for (i, m) in metas.into_iter().enumerate() {
            blocks.push(KvBlock {
                layer: m.layer,
                head: m.head,
                keys: c.get(&format!("blocks.{i}.keys"))?.to_matrix()?,
                values: c.get(&format!("blocks.{i}.values"))?.to_matrix()?,
                fill: m.fill,
                state: m.state,
            });
        }
        let next_logits = match c.get("next_logits") {
            Ok(a) => Some(a.to_scalars()?),
            Err(_) => None,
        };
        let cache = PagedKvCache {
            layers: meta_field(&c.meta, "layers")?,
            kv_heads: meta_field(&c.meta, "kv_heads")?,
            head_dim: meta_field(&c.meta, "head_dim")?,
            block_size: meta_field(&c.meta, "block_size")?,
            blocks,
            table: meta_field(&c.meta, "table")?,
            lens: meta_field(&c.meta, "lens")?,
            seq_len: meta_field(&c.meta, "seq_len")?,
            next_logits,
        };
        if cache.table.len() != cache.layers * cache.kv_heads || cache.lens.len() != cache.table.len() {
            return Err(Error::CacheInconsistency("block table does not match the layout".into()));
        }
        cache.validate()?;
        Ok(cache)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_weights, Model};

    fn small_config() -> ModelConfig {
        ModelConfig { layers: 2, hidden: 16, heads: 2, kv_heads: 1, head_dim: 8, vocab: 32, block_size: 4, ..ModelConfig::toy_mha() }
    }

    #[test]
    fn weights_roundtrip_is_bit_exact() {
        let w = init_weights(&small_config(), 5).unwrap().cast::<f32>();
        let bytes = w.to_container().unwrap().to_bytes().unwrap();
        let back = Weights::<f32>::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_container().unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn cache_roundtrip_is_bit_exact() {
        let model = Model::new(init_weights(&small_config(), 5).unwrap().cast::<f32>()).unwrap();
        let (_, cache) = model.forward_prefill(&[1, 2, 3, 4, 5, 6]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.kvc");
        cache.save(&path).unwrap();
        assert_eq!(PagedKvCache::<f32>::load(&path).unwrap(), cache);
    }

    #[test]
    fn malformed_files_report_offsets() {
        let w = init_weights(&small_config(), 5).unwrap();
        let bytes = w.to_container().unwrap().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Parse { offset: 0, .. })));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(Container::from_bytes(truncated), Err(Error::Parse { offset, .. }) if offset > 16));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            Container::from_bytes(&trailing),
            Err(Error::Parse { offset, .. }) if offset == bytes.len()
        ));
        assert!(matches!(Container::from_bytes(&bytes[..10]), Err(Error::Parse { offset: 10, .. })));
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let w = init_weights(&small_config(), 5).unwrap();
        let c = w.to_container().unwrap();
        assert!(Weights::<f32>::from_container(&c).is_err());
    }
}
