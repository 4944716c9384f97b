//! Secret key material and its calibration.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Array, ArrayData, Container};
use crate::error::{Error, Result};
use crate::linalg::{make_commuting_key, sample_orthogonal, Matrix, RotationScalingKey};
use crate::model::KvBlock;
use crate::scalar::Scalar;

/// Whether one key covers every layer or each layer has its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyScope {
    #[default]
    Global,
    PerLayer,
}

/// Knobs of key generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyParams {
    pub scale_bounds: (f64, f64),
    pub outlier_factor: f64,
    pub pad_value_factor: f64,
    /// Identifier magnitudes as multiples of θ.
    pub mask_range: (f64, f64),
    pub scope: KeyScope,
}

impl Default for KeyParams {
    fn default() -> Self {
        Self {
            scale_bounds: (0.5, 2.0),
            outlier_factor: 2.0,
            pad_value_factor: 1.5,
            mask_range: (3.0, 4.0),
            scope: KeyScope::Global,
        }
    }
}

impl KeyParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mask_range;
        let pad = self.pad_value_factor;
        let out = self.outlier_factor;
        // Data stays within θ, so identifiers on data rows exceed lo − 1 and
        // padding rows carry pad + lo at the identifier column.
        if !(1.0 < pad && pad < out && out < lo - 1.0 + 1e-12 && lo <= hi) {
            return Err(Error::InvalidConfig(format!(
                "factors must satisfy 1 < pad ({pad}) < outlier ({out}) <= mask_lo − 1 ({}) and mask_lo <= mask_hi ({hi})",
                lo - 1.0
            )));
        }
        Ok(())
    }
}

/// The matrices fused into the weights plus the row mixer `S`, sampled
/// before calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMaterial {
    /// `b × b` orthogonal.
    pub s: Matrix<f64>,
    pub m1: RotationScalingKey,
    pub m2: RotationScalingKey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyMaterial {
    pub block_size: usize,
    pub head_dim: usize,
    pub params: KeyParams,
    pub layers: Vec<LayerMaterial>,
    /// Root of the per-block permutation streams.
    pub stream_seed: u64,
}

impl KeyMaterial {
    /// Samples `S`, `M1`, `M2` (one set, or one per layer).
    pub fn sample<R: Rng + ?Sized>(
        block_size: usize,
        head_dim: usize,
        layers: usize,
        params: &KeyParams,
        rng: &mut R,
    ) -> Result<Self> {
        params.validate()?;
        if block_size > head_dim {
            return Err(Error::InvalidConfig(format!(
                "block size {block_size} exceeds head dimension {head_dim}; rows cannot carry distinct identifiers"
            )));
        }
        let count = match params.scope {
            KeyScope::Global => 1,
            KeyScope::PerLayer => layers,
        };
        let layers = (0..count)
            .map(|_| {
                Ok(LayerMaterial {
                    s: sample_orthogonal(block_size, rng)?,
                    m1: make_commuting_key(head_dim, rng, params.scale_bounds)?,
                    m2: make_commuting_key(head_dim, rng, params.scale_bounds)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { block_size, head_dim, params: params.clone(), layers, stream_seed: rng.random() })
    }

    /// Material with identity `S`, `M1`, `M2`.
    pub fn identity(block_size: usize, head_dim: usize, params: &KeyParams) -> Result<Self> {
        Ok(Self {
            block_size,
            head_dim,
            params: params.clone(),
            layers: vec![LayerMaterial {
                s: Matrix::identity(block_size),
                m1: RotationScalingKey::identity(head_dim)?,
                m2: RotationScalingKey::identity(head_dim)?,
            }],
            stream_seed: 0,
        })
    }

    pub fn for_layer(&self, layer: usize) -> Result<&LayerMaterial> {
        let idx = if self.layers.len() == 1 { 0 } else { layer };
        self.layers.get(idx).ok_or_else(|| Error::Key(format!("no key material for layer {layer}")))
    }
}

/// Calibrated per-layer secrets.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKey {
    pub s: Matrix<f64>,
    pub m1: RotationScalingKey,
    pub m2: RotationScalingKey,
    /// Identifier magnitude of row `i` of `A_K`, placed at column `i`.
    pub a_k: Vec<f64>,
    pub a_v: Vec<f64>,
    pub theta_k: f64,
    pub theta_v: f64,
}

impl LayerKey {
    /// Dense `b × d` mask with the identifier of row `i` at column `i`.
    pub fn mask(identifiers: &[f64], head_dim: usize) -> Matrix<f64> {
        let mut a = Matrix::zeros(identifiers.len(), head_dim);
        for (i, &v) in identifiers.iter().enumerate() {
            a.set(i, i, v);
        }
        a
    }

    pub fn mask_k(&self) -> Matrix<f64> {
        Self::mask(&self.a_k, self.m1.dim())
    }

    pub fn mask_v(&self) -> Matrix<f64> {
        Self::mask(&self.a_v, self.m2.dim())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CloakKey {
    pub block_size: usize,
    pub head_dim: usize,
    pub params: KeyParams,
    pub layers: Vec<LayerKey>,
    pub stream_seed: u64,
}

/// Largest absolute key and value element over `blocks` (valid rows only).
pub fn max_abs_kv<T: Scalar>(blocks: &[&KvBlock<T>]) -> (f64, f64) {
    let mut theta = (0.0f64, 0.0f64);
    for b in blocks {
        for (k, v) in b.rows() {
            theta.0 = k.iter().fold(theta.0, |m, x| m.max(x.as_f64().abs()));
            theta.1 = v.iter().fold(theta.1, |m, x| m.max(x.as_f64().abs()));
        }
    }
    theta
}

/// Finishes a key: θ_K and θ_V are the largest magnitudes in the calibration
/// blocks (which must come from the fused model), and the identifier
/// magnitudes are drawn from `mask_range · θ`.
pub fn keygen<T: Scalar, R: Rng + ?Sized>(
    material: &KeyMaterial,
    calibration: &[KvBlock<T>],
    rng: &mut R,
) -> Result<CloakKey> {
    if calibration.iter().all(|b| b.fill == 0) {
        return Err(Error::InvalidConfig("empty calibration set".into()));
    }
    let mut layers = Vec::with_capacity(material.layers.len());
    for (idx, lm) in material.layers.iter().enumerate() {
        let scoped: Vec<&KvBlock<T>> = calibration
            .iter()
            .filter(|b| material.layers.len() == 1 || b.layer == idx)
            .collect();
        let (theta_k, theta_v) = max_abs_kv(&scoped);
        if !(theta_k > 0.0 && theta_v > 0.0) {
            return Err(Error::InvalidConfig(format!("calibration set for key {idx} has no non-zero data")));
        }
        let (lo, hi) = material.params.mask_range;
        let mut draw = |theta: f64| -> Vec<f64> {
            (0..material.block_size).map(|_| theta * rng.random_range(lo..=hi)).collect()
        };
        let a_k = draw(theta_k);
        let a_v = draw(theta_v);
        layers.push(LayerKey { s: lm.s.clone(), m1: lm.m1.clone(), m2: lm.m2.clone(), a_k, a_v, theta_k, theta_v });
    }
    Ok(CloakKey {
        block_size: material.block_size,
        head_dim: material.head_dim,
        params: material.params.clone(),
        layers,
        stream_seed: material.stream_seed,
    })
}

impl CloakKey {
    pub fn for_layer(&self, layer: usize) -> Result<&LayerKey> {
        let idx = if self.layers.len() == 1 { 0 } else { layer };
        self.layers.get(idx).ok_or_else(|| Error::Key(format!("no key for layer {layer}")))
    }

    pub fn material(&self) -> KeyMaterial {
        KeyMaterial {
            block_size: self.block_size,
            head_dim: self.head_dim,
            params: self.params.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerMaterial { s: l.s.clone(), m1: l.m1.clone(), m2: l.m2.clone() })
                .collect(),
            stream_seed: self.stream_seed,
        }
    }

    /// Deterministic stream for one block at one epoch.
    pub fn block_stream(&self, layer: usize, head: usize, block: usize, epoch: u64) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&self.stream_seed.to_le_bytes());
        seed[8..12].copy_from_slice(&(layer as u32).to_le_bytes());
        seed[12..16].copy_from_slice(&(head as u32).to_le_bytes());
        seed[16..24].copy_from_slice(&(block as u64).to_le_bytes());
        seed[24..32].copy_from_slice(&epoch.to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "block_size": self.block_size,
            "head_dim": self.head_dim,
            "params": self.params,
            "layers": self.layers.len(),
            "theta_k": self.layers.iter().map(|l| l.theta_k).collect::<Vec<_>>(),
            "theta_v": self.layers.iter().map(|l| l.theta_v).collect::<Vec<_>>(),
            "m1_scale_bounds": self.layers.iter().map(|l| l.m1.scale_bounds()).collect::<Vec<_>>(),
            "m2_scale_bounds": self.layers.iter().map(|l| l.m2.scale_bounds()).collect::<Vec<_>>(),
        });
        let mut c = Container::new("key", meta);
        c.push(Array { name: "stream_seed".into(), shape: vec![1], data: ArrayData::U64(vec![self.stream_seed]) });
        let half = self.head_dim / 2;
        for (i, l) in self.layers.iter().enumerate() {
            c.push(Array::from_matrix(format!("keys.{i}.s"), &l.s));
            c.push(Array::from_scalars(format!("keys.{i}.m1.t"), vec![half], l.m1.t()));
            c.push(Array::from_scalars(format!("keys.{i}.m1.u"), vec![half], l.m1.u()));
            c.push(Array::from_scalars(format!("keys.{i}.m2.t"), vec![half], l.m2.t()));
            c.push(Array::from_scalars(format!("keys.{i}.m2.u"), vec![half], l.m2.u()));
            c.push(Array::from_scalars(format!("keys.{i}.a_k"), vec![self.block_size], &l.a_k));
            c.push(Array::from_scalars(format!("keys.{i}.a_v"), vec![self.block_size], &l.a_v));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("key")?;
        let field = |k: &str| c.meta.get(k).cloned().ok_or_else(|| Error::InvalidConfig(format!("key meta lacks {k}")));
        let block_size: usize = serde_json::from_value(field("block_size")?)?;
        let head_dim: usize = serde_json::from_value(field("head_dim")?)?;
        let params: KeyParams = serde_json::from_value(field("params")?)?;
        let count: usize = serde_json::from_value(field("layers")?)?;
        let theta_k: Vec<f64> = serde_json::from_value(field("theta_k")?)?;
        let theta_v: Vec<f64> = serde_json::from_value(field("theta_v")?)?;
        let b1: Vec<(f64, f64)> = serde_json::from_value(field("m1_scale_bounds")?)?;
        let b2: Vec<(f64, f64)> = serde_json::from_value(field("m2_scale_bounds")?)?;
        if [theta_k.len(), theta_v.len(), b1.len(), b2.len()].iter().any(|&n| n != count) {
            return Err(Error::InvalidConfig("key meta arrays disagree on the layer count".into()));
        }
        let stream_seed = *c
            .get("stream_seed")?
            .as_u64()?
            .first()
            .ok_or_else(|| Error::InvalidConfig("empty stream seed".into()))?;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let s: Matrix<f64> = c.get(&format!("keys.{i}.s"))?.to_matrix()?;
            let vec = |n: &str| c.get(&format!("keys.{i}.{n}"))?.to_scalars::<f64>();
            let layer = LayerKey {
                s,
                m1: RotationScalingKey::new(vec("m1.t")?, vec("m1.u")?, b1[i])?,
                m2: RotationScalingKey::new(vec("m2.t")?, vec("m2.u")?, b2[i])?,
                a_k: vec("a_k")?,
                a_v: vec("a_v")?,
                theta_k: theta_k[i],
                theta_v: theta_v[i],
            };
            if layer.s.shape() != (block_size, block_size)
                || layer.m1.dim() != head_dim
                || layer.m2.dim() != head_dim
                || layer.a_k.len() != block_size
                || layer.a_v.len() != block_size
            {
                return Err(Error::Key(format!("key {i} has inconsistent shapes")));
            }
            layers.push(layer);
        }
        Ok(Self { block_size, head_dim, params, layers, stream_seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
