//! Gaussian-noise baseline: per-block Frobenius clipping followed by i.i.d.
//! noise from the classic `(ε, δ)` Gaussian mechanism, applied once when a
//! cache is exported.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{BlockState, KvBlock, PagedKvCache};
use crate::scalar::Scalar;

pub const DEFAULT_DELTA: f64 = 1e-5;
pub const DEFAULT_CLIP_PERCENTILE: f64 = 0.5;

/// User-facing privacy parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_percentile")]
    pub clip_percentile: f64,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn default_percentile() -> f64 {
    DEFAULT_CLIP_PERCENTILE
}

impl DpParams {
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon, delta: DEFAULT_DELTA, clip_percentile: DEFAULT_CLIP_PERCENTILE }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(0.0..=1.0).contains(&self.clip_percentile) {
            return Err(Error::InvalidConfig(format!("clip percentile {} outside [0, 1]", self.clip_percentile)));
        }
        Ok(())
    }
}

/// Calibrated mechanism, with separate clip norms and noise scales for keys
/// and values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub params: DpParams,
    pub clip_k: f64,
    pub clip_v: f64,
    pub sigma_k: f64,
    pub sigma_v: f64,
}

impl DpConfig {
    pub fn calibrate<T: Scalar>(params: DpParams, corpus: &[KvBlock<T>]) -> Result<Self> {
        params.validate()?;
        let (clip_k, clip_v) = calibrate_clip(corpus, params.clip_percentile)?;
        Self::with_clip(params, clip_k, clip_v)
    }

    pub fn with_clip(params: DpParams, clip_k: f64, clip_v: f64) -> Result<Self> {
        params.validate()?;
        if !(clip_k > 0.0 && clip_v > 0.0) {
            return Err(Error::InvalidConfig(format!("clip norms must be positive, got {clip_k} and {clip_v}")));
        }
        Ok(Self {
            params,
            clip_k,
            clip_v,
            sigma_k: gaussian_sigma(params.epsilon, params.delta, clip_k),
            sigma_v: gaussian_sigma(params.epsilon, params.delta, clip_v),
        })
    }
}

/// `σ = C·√(2 ln(1.25/δ)) / ε`.
pub fn gaussian_sigma(epsilon: f64, delta: f64, clip: f64) -> f64 {
    clip * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon
}

/// Linearly interpolated percentile (`p ∈ [0, 1]`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Clip norms `(C_K, C_V)`: the percentile of per-block Frobenius norms,
/// taken over keys and values independently.
pub fn calibrate_clip<T: Scalar>(blocks: &[KvBlock<T>], p: f64) -> Result<(f64, f64)> {
    let blocks: Vec<&KvBlock<T>> = blocks.iter().filter(|b| b.fill > 0).collect();
    let norms = |pick: fn(&KvBlock<T>) -> &Matrix<T>| -> Vec<f64> {
        blocks.iter().map(|b| pick(b).frobenius_norm().as_f64()).collect()
    };
    let ck = percentile(&norms(|b| &b.keys), p);
    let cv = percentile(&norms(|b| &b.values), p);
    match (ck, cv) {
        (Some(ck), Some(cv)) => Ok((ck, cv)),
        _ => Err(Error::InvalidConfig("empty clipping corpus".into())),
    }
}

/// Sign applied to the sampled noise. `Mirrored` yields the antithetic
/// partner of the same draw, for variance-reduced estimates of expectations
/// over the mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSign {
    #[default]
    Direct,
    Mirrored,
}

impl NoiseSign {
    fn factor(self) -> f64 {
        match self {
            Self::Direct => 1.0,
            Self::Mirrored => -1.0,
        }
    }
}

fn clip_and_noise<T: Scalar, R: Rng + ?Sized>(
    m: &Matrix<T>,
    clip: f64,
    sigma: f64,
    sign: NoiseSign,
    rng: &mut R,
) -> Result<Matrix<T>> {
    let norm = m.frobenius_norm().as_f64();
    let factor = if norm > clip { clip / norm } else { 1.0 };
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(format!("noise scale {sigma}: {e}")))?;
    Ok(Matrix::from_fn(m.rows(), m.cols(), |r, c| {
        let v = m.get(r, c).as_f64() * factor + sign.factor() * noise.sample(rng);
        T::from_f64_lossy(v)
    }))
}

/// Clips keys to `C_K` and values to `C_V` in Frobenius norm, then adds
/// `N(0, σ²)` to every entry.
pub fn dp_protect_block<T: Scalar, R: Rng + ?Sized>(
    block: &KvBlock<T>,
    config: &DpConfig,
    rng: &mut R,
) -> Result<KvBlock<T>> {
    dp_protect_block_signed(block, config, NoiseSign::Direct, rng)
}

pub fn dp_protect_block_signed<T: Scalar, R: Rng + ?Sized>(
    block: &KvBlock<T>,
    config: &DpConfig,
    sign: NoiseSign,
    rng: &mut R,
) -> Result<KvBlock<T>> {
    if block.state != BlockState::Plaintext {
        return Err(Error::BlockState(format!("noise applies to plaintext blocks, found {:?}", block.state)));
    }
    let mut out = block.clone();
    out.keys = clip_and_noise(&block.keys, config.clip_k, config.sigma_k, sign, rng)?;
    out.values = clip_and_noise(&block.values, config.clip_v, config.sigma_v, sign, rng)?;
    out.state = BlockState::DpNoised;
    Ok(out)
}

fn block_stream(seed: u64, block: usize) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(block as u64).to_le_bytes());
    bytes[16..19].copy_from_slice(b"dp!");
    ChaCha8Rng::from_seed(bytes)
}

/// Protects every block of an exported cache. Pending logits are dropped.
pub fn dp_protect_cache<T: Scalar>(cache: &PagedKvCache<T>, config: &DpConfig, seed: u64) -> Result<PagedKvCache<T>> {
    dp_protect_cache_signed(cache, config, seed, NoiseSign::Direct)
}

pub fn dp_protect_cache_signed<T: Scalar>(
    cache: &PagedKvCache<T>,
    config: &DpConfig,
    seed: u64,
    sign: NoiseSign,
) -> Result<PagedKvCache<T>> {
    let mut out = cache.clone();
    out.set_next_logits(None);
    for (id, block) in out.blocks_mut().iter_mut().enumerate() {
        *block = dp_protect_block_signed(block, config, sign, &mut block_stream(seed, id))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_with(norm_target: f64) -> KvBlock<f64> {
        let mut b = KvBlock::empty(0, 0, 16, 128);
        b.keys = Matrix::from_fn(16, 128, |r, c| ((r * 7 + c * 3) % 11) as f64 - 5.0);
        b.values = b.keys.scale(0.5);
        let k = norm_target / b.keys.frobenius_norm();
        b.keys = b.keys.scale(k);
        b.values = b.values.scale(k);
        b.fill = 16;
        b
    }

    #[test]
    fn sigma_formula() {
        let s = gaussian_sigma(1.0, 1e-5, 1.0);
        assert!((s - (2.0 * 125_000f64.ln()).sqrt()).abs() < 1e-12);
        assert!((s - 4.844).abs() < 1e-3);
        assert!((gaussian_sigma(10.0, 1e-5, 1.0) - s / 10.0).abs() < 1e-12);
        assert!((gaussian_sigma(1.0, 1e-5, 3.0) - 3.0 * s).abs() < 1e-12);
    }

    #[test]
    fn percentile_is_an_order_statistic() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), Some(50.5));
        assert_eq!(percentile(&[5.0], 0.5), Some(5.0));
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(percentile(&v, 1.0), Some(100.0));
        assert_eq!(percentile(&[], 0.5), None);
    }

    #[test]
    fn clip_norms_are_separate_for_keys_and_values() {
        let (ck, cv) = calibrate_clip(&[block_with(5.0)], 0.5).unwrap();
        assert!((ck - 5.0).abs() < 1e-12);
        assert!((cv - 2.5).abs() < 1e-12);
        assert!(calibrate_clip::<f64>(&[], 0.5).is_err());
    }

    #[test]
    fn clipping_hits_the_bound_exactly() {
        let b = block_with(2.0);
        let cfg = DpConfig::with_clip(DpParams::new(1e300), 1.0, 1.0).unwrap();
        let out = dp_protect_block(&b, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((out.keys.frobenius_norm() - 1.0).abs() < 1e-9);
        assert_eq!(out.state, BlockState::DpNoised);
        let small = block_with(0.5);
        let kept = dp_protect_block(&small, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(kept.keys.max_abs_diff(&small.keys) < 1e-12);
    }

    #[test]
    fn noise_has_the_calibrated_spread() {
        let b = block_with(1.0);
        let cfg = DpConfig::with_clip(DpParams::new(10.0), 1.0, 1.0).unwrap();
        let out = dp_protect_block(&b, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let diffs: Vec<f64> = out.keys.data().iter().zip(b.keys.data()).map(|(o, i)| o - i).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
        assert!((var.sqrt() / cfg.sigma_k - 1.0).abs() < 0.1);
    }

    #[test]
    fn mirrored_noise_is_the_antithetic_partner() {
        let b = block_with(3.0);
        let cfg = DpConfig::with_clip(DpParams::new(5.0), 1.0, 1.0).unwrap();
        let plus = dp_protect_block_signed(&b, &cfg, NoiseSign::Direct, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let minus = dp_protect_block_signed(&b, &cfg, NoiseSign::Mirrored, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let clipped = b.keys.scale(1.0 / 3.0);
        for ((p, m), c) in plus.keys.data().iter().zip(minus.keys.data()).zip(clipped.data()) {
            assert!(((p + m) / 2.0 - c).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(DpParams::new(0.0).validate().is_err());
        assert!(DpParams { delta: 1.0, ..DpParams::new(1.0) }.validate().is_err());
        assert!(DpConfig::with_clip(DpParams::new(1.0), 0.0, 1.0).is_err());
    }
}
