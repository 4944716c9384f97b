//! Experiment description, read from and written to plain JSON.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{CollisionParams, InversionMode};
use crate::cloak::KeyParams;
use crate::dp::DpParams;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// How corpus tokens are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CorpusSource {
    /// BOS followed by tokens sampled from the base model at `temperature`,
    /// never emitting BOS or repeating the previous token.
    ModelSampled { temperature: f64 },
    /// Independent uniform tokens over the whole vocabulary.
    Uniform,
    /// BOS followed by distinct uniform tokens.
    DistinctUniform,
}

impl Default for CorpusSource {
    fn default() -> Self {
        Self::ModelSampled { temperature: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub count: usize,
    /// Inclusive length bounds, drawn uniformly.
    pub min_len: usize,
    pub max_len: usize,
    pub source: CorpusSource,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { count: 8, min_len: 20, max_len: 64, source: CorpusSource::default() }
    }
}

impl CorpusConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidConfig(format!("length range {}..={} is empty", self.min_len, self.max_len)));
        }
        match self.source {
            CorpusSource::ModelSampled { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")))
            }
            CorpusSource::ModelSampled { .. } if vocab < 3 => {
                Err(Error::InvalidConfig("model sampling needs at least three tokens".into()))
            }
            CorpusSource::DistinctUniform if self.max_len > vocab => Err(Error::InvalidConfig(format!(
                "{} distinct tokens requested from a vocabulary of {vocab}",
                self.max_len
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DefenseSpec {
    Plaintext,
    Kvcloak {
        #[serde(default)]
        key: KeyParams,
    },
    Dp(DpParams),
}

impl DefenseSpec {
    pub fn label(&self) -> String {
        match self {
            Self::Plaintext => "plaintext".into(),
            Self::Kvcloak { .. } => "kvcloak".into(),
            Self::Dp(p) => format!("dp(eps={:e})", p.epsilon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AttackSpec {
    Inversion {
        mode: InversionMode,
    },
    Collision {
        #[serde(default)]
        params: CollisionParams,
        /// Fit the enhanced threshold on the calibration corpus first.
        #[serde(default)]
        calibrate_enhanced: bool,
    },
    /// Runs against the echo model, which regenerates its context when the
    /// instruction is appended.
    Injection {
        instruction: Vec<u32>,
        /// Tokens to generate; the prompt length when absent.
        #[serde(default)]
        max_new: Option<usize>,
    },
}

impl AttackSpec {
    pub fn label(&self) -> String {
        match self {
            Self::Inversion { mode } => format!("inversion({mode:?})").to_lowercase(),
            Self::Collision { calibrate_enhanced: true, .. } => "collision(enhanced)".into(),
            Self::Collision { params, .. } if params.vocab_fraction < 1.0 => {
                format!("collision(fraction={})", params.vocab_fraction)
            }
            Self::Collision { .. } => "collision".into(),
            Self::Injection { .. } => "injection".into(),
        }
    }

    pub fn uses_layers(&self) -> bool {
        !matches!(self, Self::Injection { .. })
    }
}

/// Layer choice relative to the model depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerChoice {
    First,
    Mid,
    Last,
}

impl LayerChoice {
    pub const ALL: [Self; 3] = [Self::First, Self::Mid, Self::Last];

    pub fn resolve(self, layers: usize) -> usize {
        match self {
            Self::First => 0,
            Self::Mid => layers / 2,
            Self::Last => layers - 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingConfig {
    /// Timed repetitions after one discarded warm-up.
    pub repetitions: usize,
    /// Prompt length of the timed workload.
    pub prompt_len: usize,
    /// Tokens decoded per timed run.
    pub decode_tokens: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self { repetitions: 5, prompt_len: 48, decode_tokens: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema: u32,
    /// Root of every random stream in the run.
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub corpus: CorpusConfig,
    /// Held-out sequences for key, clip and threshold calibration.
    #[serde(default = "default_calibration")]
    pub calibration: CorpusConfig,
    /// Relative perturbation of the target model against the attacker's copy.
    #[serde(default)]
    pub target_perturbation: f64,
    pub defenses: Vec<DefenseSpec>,
    pub attacks: Vec<AttackSpec>,
    #[serde(default = "default_layers")]
    pub layers: Vec<LayerChoice>,
    #[serde(default)]
    pub timing: Option<TimingConfig>,
}

fn default_calibration() -> CorpusConfig {
    CorpusConfig { count: 4, ..CorpusConfig::default() }
}

fn default_layers() -> Vec<LayerChoice> {
    LayerChoice::ALL.to_vec()
}

impl ExperimentConfig {
    /// Small full matrix over the toy MHA model.
    pub fn default_matrix(seed: u64) -> Self {
        Self {
            schema: CONFIG_SCHEMA,
            seed,
            model: ModelConfig::toy_mha(),
            precision: Precision::F32,
            corpus: CorpusConfig { count: 4, ..CorpusConfig::default() },
            calibration: default_calibration(),
            target_perturbation: 0.01,
            defenses: vec![
                DefenseSpec::Plaintext,
                DefenseSpec::Kvcloak { key: KeyParams::default() },
                DefenseSpec::Dp(DpParams::new(1e8)),
            ],
            attacks: vec![
                AttackSpec::Inversion { mode: InversionMode::Exact },
                AttackSpec::Collision { params: CollisionParams::default(), calibrate_enhanced: false },
                AttackSpec::Injection { instruction: vec![crate::model::echo::BOS], max_new: None },
            ],
            layers: default_layers(),
            timing: Some(TimingConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::InvalidConfig(format!("config schema {} (supported: {CONFIG_SCHEMA})", self.schema)));
        }
        self.model.validate()?;
        self.corpus.validate(self.model.vocab)?;
        self.calibration.validate(self.model.vocab)?;
        if self.calibration.count == 0 {
            return Err(Error::InvalidConfig("calibration corpus is empty".into()));
        }
        if !(self.target_perturbation >= 0.0 && self.target_perturbation.is_finite()) {
            return Err(Error::InvalidConfig("target perturbation must be finite and non-negative".into()));
        }
        for d in &self.defenses {
            match d {
                DefenseSpec::Kvcloak { key } => key.validate()?,
                DefenseSpec::Dp(p) => p.validate()?,
                DefenseSpec::Plaintext => {}
            }
        }
        for a in &self.attacks {
            match a {
                AttackSpec::Collision { params, .. } => params.validate(self.model.vocab)?,
                AttackSpec::Injection { instruction, .. } if instruction.is_empty() => {
                    return Err(Error::InvalidConfig("injection instruction is empty".into()));
                }
                _ => {}
            }
        }
        if let Some(t) = &self.timing {
            if t.repetitions == 0 || t.prompt_len == 0 {
                return Err(Error::InvalidConfig("timing needs repetitions and a prompt".into()));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Purposes of the independent random streams derived from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Weights = 1,
    Perturbation = 2,
    Corpus = 3,
    Calibration = 4,
    Key = 5,
    Cloak = 6,
    Dp = 7,
    Echo = 8,
    Timing = 9,
}

/// Deterministic per-purpose, per-index generators under one root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    root: u64,
}

impl SeedTree {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn seed(&self, stream: Stream, index: u64) -> u64 {
        // SplitMix64 finalizer over the three inputs.
        let mut z = self.root ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn rng(&self, stream: Stream, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(stream, index))
    }
}
