use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Optional position-wise feed-forward block (pre-norm, ReLU).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights<T> {
    pub norm_gain: Vec<T>,
    /// `F × D`
    pub up: Matrix<T>,
    /// `D × F`
    pub down: Matrix<T>,
}

/// Attention parameters of one decoder layer. Projections act on column
/// vectors: `k = W_k · x`, matching `k = x W_kᵀ` for row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    /// `D × D`
    pub wq: Matrix<T>,
    /// `(H_kv·d) × D`
    pub wk: Matrix<T>,
    /// `(H_kv·d) × D`
    pub wv: Matrix<T>,
    /// `D × D`
    pub wo: Matrix<T>,
    pub attn_norm_gain: Vec<T>,
    pub mlp: Option<MlpWeights<T>>,
}

/// All model parameters; the unembedding is tied to `embedding`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub config: ModelConfig,
    /// `V × D`
    pub embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm_gain: Vec<T>,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Deterministic Gaussian initialization with standard deviation `1/√D`
/// (`1/√F` for the MLP down-projection) and unit norm gains.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<Weights<f64>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_model = config.hidden;
    let std = 1.0 / (d_model as f64).sqrt();
    let embedding = gaussian(config.vocab, d_model, std, &mut rng);
    let layers = (0..config.layers)
        .map(|_| {
            let wq = gaussian(d_model, d_model, std, &mut rng);
            let wk = gaussian(config.kv_dim(), d_model, std, &mut rng);
            let wv = gaussian(config.kv_dim(), d_model, std, &mut rng);
            let wo = gaussian(d_model, d_model, std, &mut rng);
            let mlp = (config.mlp_hidden > 0).then(|| MlpWeights {
                norm_gain: vec![1.0; d_model],
                up: gaussian(config.mlp_hidden, d_model, std, &mut rng),
                down: gaussian(d_model, config.mlp_hidden, 1.0 / (config.mlp_hidden as f64).sqrt(), &mut rng),
            });
            LayerWeights { wq, wk, wv, wo, attn_norm_gain: vec![1.0; d_model], mlp }
        })
        .collect();
    Ok(Weights { config: config.clone(), embedding, layers, final_norm_gain: vec![1.0; d_model] })
}

impl<T: Scalar> Weights<T> {
    /// Checks every tensor against the configuration and for finiteness.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let expect = |name: &str, m: &Matrix<T>, shape: (usize, usize)| -> Result<()> {
            if m.shape() != shape {
                return Err(Error::DimensionMismatch(format!("{name} is {:?}, expected {shape:?}", m.shape())));
            }
            if !m.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} has non-finite entries")));
            }
            Ok(())
        };
        let expect_len = |name: &str, v: &[T], n: usize| -> Result<()> {
            if v.len() != n || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::DimensionMismatch(format!("{name} has {} entries, expected {n}", v.len())));
            }
            Ok(())
        };
        expect("embedding", &self.embedding, (c.vocab, c.hidden))?;
        if self.layers.len() != c.layers {
            return Err(Error::DimensionMismatch(format!("{} layers, expected {}", self.layers.len(), c.layers)));
        }
        for (l, lw) in self.layers.iter().enumerate() {
            expect(&format!("layer {l} wq"), &lw.wq, (c.hidden, c.hidden))?;
            expect(&format!("layer {l} wk"), &lw.wk, (c.kv_dim(), c.hidden))?;
            expect(&format!("layer {l} wv"), &lw.wv, (c.kv_dim(), c.hidden))?;
            expect(&format!("layer {l} wo"), &lw.wo, (c.hidden, c.hidden))?;
            expect_len(&format!("layer {l} attn_norm_gain"), &lw.attn_norm_gain, c.hidden)?;
            match (&lw.mlp, c.mlp_hidden) {
                (None, 0) => {}
                (Some(m), f) if f > 0 => {
                    expect(&format!("layer {l} mlp up"), &m.up, (f, c.hidden))?;
                    expect(&format!("layer {l} mlp down"), &m.down, (c.hidden, f))?;
                    expect_len(&format!("layer {l} mlp norm"), &m.norm_gain, c.hidden)?;
                }
                _ => return Err(Error::InvalidConfig(format!("layer {l} MLP presence disagrees with config"))),
            }
        }
        expect_len("final_norm_gain", &self.final_norm_gain, c.hidden)
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect::<Vec<U>>();
        Weights {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    attn_norm_gain: cv(&l.attn_norm_gain),
                    mlp: l.mlp.as_ref().map(|m| MlpWeights {
                        norm_gain: cv(&m.norm_gain),
                        up: m.up.cast(),
                        down: m.down.cast(),
                    }),
                })
                .collect(),
            final_norm_gain: cv(&self.final_norm_gain),
        }
    }
}

impl Weights<f64> {
    /// Adds seeded Gaussian noise of relative magnitude `rho` to every tensor:
    /// each entry moves by `rho · rms(tensor) · N(0, 1)`. Emulates a
    /// fine-tuned deployment derived from a public base model.
    pub fn perturbed(&self, rho: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        if rho == 0.0 {
            return out;
        }
        let mut jitter = |data: &mut [f64]| {
            let rms = (data.iter().map(|v| v * v).sum::<f64>() / data.len().max(1) as f64).sqrt();
            for v in data {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += rho * rms * z;
            }
        };
        jitter(out.embedding.data_mut());
        for l in &mut out.layers {
            jitter(l.wq.data_mut());
            jitter(l.wk.data_mut());
            jitter(l.wv.data_mut());
            jitter(l.wo.data_mut());
            jitter(&mut l.attn_norm_gain);
            if let Some(m) = &mut l.mlp {
                jitter(m.up.data_mut());
                jitter(m.down.data_mut());
                jitter(&mut m.norm_gain);
            }
        }
        jitter(&mut out.final_norm_gain);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::toy_mha();
        let a = init_weights(&cfg, 42).unwrap();
        let b = init_weights(&cfg, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_weights(&cfg, 43).unwrap());
    }

    #[test]
    fn init_scale_matches_inverse_sqrt_hidden() {
        let cfg = ModelConfig { hidden: 64, heads: 1, kv_heads: 1, head_dim: 64, ..ModelConfig::toy_mha() };
        let w = init_weights(&cfg, 1).unwrap();
        let data = w.layers[0].wq.data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let std = (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = 1.0 / 64f64.sqrt();
        assert!((std - target).abs() <= 0.2 * target, "std {std}");
    }

    #[test]
    fn init_rejects_bad_grouping() {
        let cfg = ModelConfig { heads: 2, kv_heads: 3, ..ModelConfig::toy_mha() };
        assert!(matches!(init_weights(&cfg, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn perturbation_is_relative_and_seeded() {
        let w = init_weights(&ModelConfig::toy_mha(), 0).unwrap();
        let p = w.perturbed(1e-2, 9);
        assert_eq!(p, w.perturbed(1e-2, 9));
        let diff = p.layers[0].wk.sub(&w.layers[0].wk).unwrap().frobenius_norm();
        let rel = diff / w.layers[0].wk.frobenius_norm();
        assert!((rel - 1e-2).abs() < 2e-3, "relative change {rel}");
        assert_eq!(w.perturbed(0.0, 9), w);
    }

    #[test]
    fn mlp_weights_when_enabled() {
        let cfg = ModelConfig { mlp_hidden: 32, ..ModelConfig::toy_mha() };
        let w = init_weights(&cfg, 0).unwrap();
        w.validate().unwrap();
        assert!(w.layers.iter().all(|l| l.mlp.is_some()));
    }
}
