//! Defense × attack × layer matrix runs.

use std::time::Instant;

use super::config::{AttackSpec, CorpusConfig, CorpusSource, DefenseSpec, ExperimentConfig, Precision, SeedTree, Stream};
use super::corpus::generate_corpus;
use super::report::{
    aggregate, DefenseTiming, ObfuscationTiming, Overheads, Report, TrialRecord, UtilityRecord, REPORT_SCHEMA,
};
use crate::attacks::{
    calibrate_enhanced, collision_attack, injection_attack, inversion_attack, AttackReport, CollisionParams,
    PositionRecord,
};
use crate::cloak::{
    cloak_cache, cloak_cache_with, flop_model, provision, CloakKey, CloakPath, FusedWeights, ProtectedSession,
};
use crate::dp::{dp_protect_cache, dp_protect_cache_signed, DpConfig, NoiseSign};
use crate::error::Result;
use crate::model::echo::{echo_weights, BOS};
use crate::model::{argmax, Model, PagedKvCache, Weights};
use crate::scalar::Scalar;

/// Served model, attacker's copy and the prompts of one workload.
struct Scenario<T> {
    target: Model<T>,
    attacker: Model<T>,
    corpus: Vec<Vec<u32>>,
    calibration: Vec<Vec<u32>>,
}

impl<T: Scalar> Scenario<T> {
    fn toy(config: &ExperimentConfig, seeds: &SeedTree) -> Result<Self> {
        let base = crate::model::init_weights(&config.model, seeds.seed(Stream::Weights, 0))?;
        let target = if config.target_perturbation > 0.0 {
            base.perturbed(config.target_perturbation, seeds.seed(Stream::Perturbation, 0))
        } else {
            base.clone()
        };
        let attacker = Model::new(base.cast::<T>())?;
        let vocab = config.model.vocab;
        let corpus = generate_corpus(&config.corpus, vocab, Some(&attacker), &mut seeds.rng(Stream::Corpus, 0))?;
        let calibration =
            generate_corpus(&config.calibration, vocab, Some(&attacker), &mut seeds.rng(Stream::Calibration, 0))?;
        Ok(Self { target: Model::new(target.cast::<T>())?, attacker, corpus, calibration })
    }

    /// Echo model over prompts of distinct tokens, so that injected
    /// instructions make it replay its context.
    fn echo(config: &ExperimentConfig, seeds: &SeedTree) -> Result<Self> {
        let vocab = config.model.vocab;
        let weights: Weights<T> = echo_weights(vocab, seeds.seed(Stream::Echo, 0))?.cast();
        let distinct = |c: &CorpusConfig| CorpusConfig {
            source: CorpusSource::DistinctUniform,
            min_len: c.min_len.min(vocab),
            max_len: c.max_len.min(vocab),
            ..c.clone()
        };
        let corpus = generate_corpus::<T, _>(&distinct(&config.corpus), vocab, None, &mut seeds.rng(Stream::Corpus, 1))?;
        let calibration =
            generate_corpus::<T, _>(&distinct(&config.calibration), vocab, None, &mut seeds.rng(Stream::Calibration, 1))?;
        let model = Model::new(weights)?;
        Ok(Self { target: model.clone(), attacker: model, corpus, calibration })
    }
}

/// A defense ready to transform caches of one scenario.
enum Prepared<T> {
    Plaintext,
    Cloak { key: CloakKey, weights: FusedWeights<T>, fused: Model<T> },
    Dp(DpConfig),
}

fn prepare<T: Scalar>(
    spec: &DefenseSpec,
    scenario: &Scenario<T>,
    seeds: &SeedTree,
    index: u64,
) -> Result<Prepared<T>> {
    Ok(match spec {
        DefenseSpec::Plaintext => Prepared::Plaintext,
        DefenseSpec::Kvcloak { key } => {
            let mut rng = seeds.rng(Stream::Key, index);
            let (key, fused) = provision(scenario.target.weights(), &scenario.calibration, key, &mut rng)?;
            Prepared::Cloak { key, fused: Model::new(fused.as_weights().clone())?, weights: fused }
        }
        DefenseSpec::Dp(params) => {
            let mut blocks = Vec::new();
            for seq in &scenario.calibration {
                blocks.extend(scenario.target.forward_prefill(seq)?.1.blocks().iter().cloned());
            }
            Prepared::Dp(DpConfig::calibrate(*params, &blocks)?)
        }
    })
}

impl<T: Scalar> Prepared<T> {
    /// Prefills `seq` on the served model and applies the defense to the
    /// exported cache.
    fn export(&self, scenario: &Scenario<T>, seq: &[u32], seeds: &SeedTree, item: u64) -> Result<PagedKvCache<T>> {
        match self {
            Self::Plaintext => Ok(scenario.target.forward_prefill(seq)?.1),
            Self::Cloak { key, fused, .. } => cloak_cache(&fused.forward_prefill(seq)?.1, key, item),
            Self::Dp(cfg) => dp_protect_cache(&scenario.target.forward_prefill(seq)?.1, cfg, seeds.seed(Stream::Dp, item)),
        }
    }
}

fn strip_bos(seq: &[u32]) -> &[u32] {
    match seq.first() {
        Some(&BOS) => &seq[1..],
        _ => seq,
    }
}

fn run_attack<T: Scalar>(
    attack: &AttackSpec,
    layer: Option<usize>,
    cache: &PagedKvCache<T>,
    seq: &[u32],
    scenario: &Scenario<T>,
    collision: Option<&CollisionParams>,
) -> Result<AttackReport> {
    match attack {
        AttackSpec::Inversion { mode } => {
            let layer = layer.expect("layered attack");
            inversion_attack(&cache.extract_layer_kv(layer)?, scenario.attacker.weights(), layer, *mode, Some(seq))
        }
        AttackSpec::Collision { .. } => {
            let params = collision.expect("collision parameters resolved");
            collision_attack(&cache.extract_layer_kv(params.layer)?, &scenario.attacker, params, Some(seq))
        }
        AttackSpec::Injection { instruction, max_new } => {
            let truth = strip_bos(seq);
            let start = Instant::now();
            let out = injection_attack(cache, instruction, max_new.unwrap_or(truth.len()), &scenario.attacker)?;
            let mut report =
                AttackReport::new(out.tokens.into_iter().map(PositionRecord::direct).collect(), start.elapsed().as_secs_f64());
            report.protected_input = out.protected_input;
            Ok(report.scored(Some(truth)))
        }
    }
}

/// Collision parameters for one cell, fitting the enhanced threshold on the
/// defended calibration caches when requested.
fn collision_params<T: Scalar>(
    attack: &AttackSpec,
    layer: usize,
    prepared: &Prepared<T>,
    scenario: &Scenario<T>,
    seeds: &SeedTree,
) -> Result<Option<CollisionParams>> {
    let AttackSpec::Collision { params, calibrate_enhanced: enhanced } = attack else {
        return Ok(None);
    };
    let mut params = CollisionParams { layer, ..params.clone() };
    if *enhanced {
        let mut known = Vec::new();
        for (i, seq) in scenario.calibration.iter().enumerate() {
            let cache = prepared.export(scenario, seq, seeds, 1_000_000 + i as u64)?;
            known.push((seq.clone(), cache.extract_layer_kv(layer)?));
        }
        params.threshold_mode = calibrate_enhanced(&scenario.attacker, &known, &params)?.mode();
    }
    Ok(Some(params))
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let peak = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|x| (x - peak).exp()).sum::<f64>().ln() + peak;
    v.iter().map(|x| x - lse).collect()
}

/// `KL(softmax(p) ‖ softmax(q))` of two logit vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let (lp, lq) = (log_softmax(p), log_softmax(q));
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

#[derive(Default)]
struct UtilityAccumulator {
    kl: f64,
    max_diff: f64,
    agree: f64,
    positions: usize,
}

impl UtilityAccumulator {
    /// Adds one position, averaging over the defended variants given.
    fn push<T: Scalar>(&mut self, reference: &[T], defended: &[Vec<T>]) {
        let p: Vec<f64> = reference.iter().map(|x| x.as_f64()).collect();
        let n = defended.len() as f64;
        for d in defended {
            let q: Vec<f64> = d.iter().map(|x| x.as_f64()).collect();
            self.kl += kl_divergence(&p, &q) / n;
            let diff = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            self.max_diff = self.max_diff.max(diff);
            self.agree += f64::from(u8::from(argmax(&p) == argmax(&q))) / n;
        }
        self.positions += 1;
    }

    fn finish(self, defense: String) -> UtilityRecord {
        let n = self.positions.max(1) as f64;
        UtilityRecord {
            defense,
            mean_kl: self.kl / n,
            max_logit_diff: self.max_diff,
            top1_agreement: self.agree / n,
            positions: self.positions,
        }
    }
}

/// Teacher-forced continuation of the second half of each sequence after
/// exporting the first half through the defense. Noise-based defenses are
/// evaluated on antithetic pairs of the same draw.
fn measure_utility<T: Scalar>(
    label: String,
    prepared: &Prepared<T>,
    scenario: &Scenario<T>,
    seeds: &SeedTree,
) -> Result<UtilityRecord> {
    let mut acc = UtilityAccumulator::default();
    for (i, seq) in scenario.corpus.iter().enumerate() {
        let split = seq.len().div_ceil(2);
        let (prefix, rest) = seq.split_at(split);
        let (_, mut reference) = scenario.target.forward_prefill(prefix)?;
        let reference_logits = scenario.target.extend(&mut reference, rest)?;
        let defended: Vec<Vec<Vec<T>>> = match prepared {
            Prepared::Plaintext => vec![reference_logits.clone()],
            Prepared::Cloak { key, weights, .. } => {
                let mut session = ProtectedSession::new(weights.clone(), key.clone())?;
                session.extend(prefix)?;
                vec![session.extend(rest)?]
            }
            Prepared::Dp(cfg) => {
                let (_, cache) = scenario.target.forward_prefill(prefix)?;
                let seed = seeds.seed(Stream::Dp, 2_000_000 + i as u64);
                [NoiseSign::Direct, NoiseSign::Mirrored]
                    .into_iter()
                    .map(|sign| {
                        let mut noisy = dp_protect_cache_signed(&cache, cfg, seed, sign)?;
                        scenario.target.extend(&mut noisy, rest)
                    })
                    .collect::<Result<_>>()?
            }
        };
        for (pos, reference) in reference_logits.iter().enumerate() {
            let variants: Vec<Vec<T>> = defended.iter().map(|d| d[pos].clone()).collect();
            acc.push(reference, &variants);
        }
    }
    Ok(acc.finish(label))
}

/// Median of `repetitions` timed calls after one discarded warm-up.
pub fn median_time<F: FnMut() -> Result<()>>(repetitions: usize, mut f: F) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) })
}

fn measure_overheads<T: Scalar>(
    config: &ExperimentConfig,
    prepared: &[(String, Prepared<T>)],
    scenario: &Scenario<T>,
    seeds: &SeedTree,
) -> Result<Option<Overheads>> {
    let Some(timing) = config.timing else { return Ok(None) };
    let prompt_cfg = CorpusConfig { count: 1, min_len: timing.prompt_len, max_len: timing.prompt_len, ..config.corpus.clone() };
    let prompt = generate_corpus(&prompt_cfg, config.model.vocab, Some(&scenario.attacker), &mut seeds.rng(Stream::Timing, 0))?
        .pop()
        .expect("one prompt");
    let reps = timing.repetitions;
    let decode = timing.decode_tokens;
    let plaintext_seconds = median_time(reps, || {
        let (_, mut cache) = scenario.target.forward_prefill(&prompt)?;
        scenario.target.generate_greedy(&mut cache, decode).map(drop)
    })?;
    let mut defenses = Vec::new();
    let mut obfuscation = None;
    for (label, p) in prepared {
        let seconds = match p {
            Prepared::Plaintext => plaintext_seconds,
            Prepared::Cloak { key, weights, fused } => {
                let seconds = median_time(reps, || {
                    let mut session = ProtectedSession::new(weights.clone(), key.clone())?;
                    session.extend(&prompt)?;
                    session.generate_greedy(decode).map(drop)
                })?;
                if obfuscation.is_none() {
                    let fused_cache = fused.forward_prefill(&prompt)?.1;
                    let plain_cache = scenario.target.forward_prefill(&prompt)?.1;
                    let fused_seconds =
                        median_time(reps, || cloak_cache_with(&fused_cache, key, 0, CloakPath::Fused).map(drop))?;
                    let unfused_seconds =
                        median_time(reps, || cloak_cache_with(&plain_cache, key, 0, CloakPath::Unfused).map(drop))?;
                    obfuscation =
                        Some(ObfuscationTiming { fused_seconds, unfused_seconds, blocks: fused_cache.blocks().len() });
                }
                seconds
            }
            Prepared::Dp(cfg) => median_time(reps, || {
                let (_, cache) = scenario.target.forward_prefill(&prompt)?;
                let mut noisy = dp_protect_cache(&cache, cfg, 0)?;
                noisy.set_next_logits(cache.next_logits().map(<[T]>::to_vec));
                scenario.target.generate_greedy(&mut noisy, decode).map(drop)
            })?,
        };
        defenses.push(DefenseTiming { defense: label.clone(), seconds, overhead: seconds / plaintext_seconds - 1.0 });
    }
    Ok(Some(Overheads { plaintext_seconds, defenses, obfuscation }))
}

/// Runs every (defense, attack, layer) cell over the corpus. Module errors
/// abort only the trial they occur in and are recorded.
pub fn run_matrix(config: &ExperimentConfig) -> Result<Report> {
    config.validate()?;
    match config.precision {
        Precision::F32 => run::<f32>(config),
        Precision::F64 => run::<f64>(config),
    }
}

fn run<T: Scalar>(config: &ExperimentConfig) -> Result<Report> {
    let start = Instant::now();
    let seeds = SeedTree::new(config.seed);
    let toy = Scenario::<T>::toy(config, &seeds)?;
    let echo = if config.attacks.iter().any(|a| !a.uses_layers()) { Some(Scenario::<T>::echo(config, &seeds)?) } else { None };

    let mut layers: Vec<usize> = config.layers.iter().map(|c| c.resolve(config.model.layers)).collect();
    layers.dedup();

    let mut trials = Vec::new();
    let mut utility = Vec::new();
    let mut prepared_toy = Vec::new();
    for (d_idx, defense) in config.defenses.iter().enumerate() {
        let label = defense.label();
        let on_toy = prepare(defense, &toy, &seeds, d_idx as u64);
        let on_echo = echo.as_ref().map(|s| prepare(defense, s, &seeds, 1_000 + d_idx as u64));
        for attack in &config.attacks {
            let (scenario, prepared) = match (attack.uses_layers(), &echo, &on_echo) {
                (false, Some(s), Some(p)) => (s, p),
                _ => (&toy, &on_toy),
            };
            let cell_layers: Vec<Option<usize>> =
                if attack.uses_layers() { layers.iter().copied().map(Some).collect() } else { vec![None] };
            for layer in cell_layers {
                let params = match prepared {
                    Ok(p) => collision_params(attack, layer.unwrap_or(0), p, scenario, &seeds),
                    Err(e) => Err(crate::Error::InvalidConfig(format!("defense setup failed: {e}"))),
                };
                for (item, seq) in scenario.corpus.iter().enumerate() {
                    let outcome = params.as_ref().map_err(|e| e.to_string()).and_then(|params| {
                        let p = prepared.as_ref().map_err(|e| e.to_string())?;
                        let cache = p.export(scenario, seq, &seeds, item as u64).map_err(|e| e.to_string())?;
                        run_attack(attack, layer, &cache, seq, scenario, params.as_ref()).map_err(|e| e.to_string())
                    });
                    let (report, error) = match outcome {
                        Ok(r) => (Some(r), None),
                        Err(e) => (None, Some(e)),
                    };
                    trials.push(TrialRecord {
                        defense: label.clone(),
                        attack: attack.label(),
                        layer,
                        trial: item,
                        error,
                        report,
                    });
                }
            }
        }
        if let Ok(p) = &on_toy {
            utility.push(measure_utility(label.clone(), p, &toy, &seeds)?);
        }
        if let Ok(p) = on_toy {
            prepared_toy.push((label, p));
        }
    }
    let overheads = measure_overheads(config, &prepared_toy, &toy, &seeds)?;
    Ok(Report {
        schema: REPORT_SCHEMA,
        config: config.clone(),
        aggregates: aggregate(&trials),
        trials,
        utility,
        flops: flop_model(config.model.block_size as u64, config.model.head_dim as u64, config.model.hidden as u64),
        overheads,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let p = [1.0, 2.0, 0.5];
        assert!(kl_divergence(&p, &p).abs() < 1e-15);
        assert!(kl_divergence(&p, &[0.0, 0.0, 0.0]) > 0.0);
        // Shift invariance.
        assert!(kl_divergence(&p, &[2.0, 3.0, 1.5]).abs() < 1e-12);
    }

    #[test]
    fn median_of_timings() {
        let mut calls = 0;
        let t = median_time(3, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 4);
        assert!(t >= 0.0);
    }
}
