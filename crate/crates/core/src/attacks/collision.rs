//! Token-by-token reconstruction by matching locally generated cache entries
//! against a leaked cache.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::{AttackReport, Decision, PositionRecord};
use super::slices::LayerSlices;
use super::threshold::{enhanced_threshold, DistanceStats, RunningStats, ThresholdChoice};
use crate::error::{Error, Result};
use crate::model::{BlockState, KvBlock, Model, PagedKvCache};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ThresholdMode {
    /// Accept below `μ_other − sigma_multiplier · σ_other`.
    Heuristic,
    /// Accept below a fixed threshold fitted for an expected rank.
    Enhanced { rank: usize, threshold: f64 },
}

/// Which cache tensors enter the distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceParts {
    #[default]
    Both,
    KeysOnly,
    ValuesOnly,
}

/// Window of distances the heuristic statistics are computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsWindow {
    /// All candidates evaluated so far at the current position.
    #[default]
    Cumulative,
    /// Only the current batch.
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollisionParams {
    pub layer: usize,
    pub batch_size: usize,
    pub sigma_multiplier: f64,
    pub vocab_fraction: f64,
    pub threshold_mode: ThresholdMode,
    pub parts: DistanceParts,
    pub window: StatsWindow,
}

impl Default for CollisionParams {
    fn default() -> Self {
        Self {
            layer: 0,
            batch_size: 256,
            sigma_multiplier: 3.0,
            vocab_fraction: 1.0,
            threshold_mode: ThresholdMode::Heuristic,
            parts: DistanceParts::Both,
            window: StatsWindow::Cumulative,
        }
    }
}

impl CollisionParams {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.vocab_fraction > 0.0 && self.vocab_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("vocab fraction {} outside (0, 1]", self.vocab_fraction)));
        }
        if !(self.sigma_multiplier.is_finite() && self.sigma_multiplier >= 0.0) {
            return Err(Error::InvalidConfig("sigma multiplier must be finite and non-negative".into()));
        }
        if self.threshold_mode == ThresholdMode::Heuristic {
            let window = match self.window {
                StatsWindow::Cumulative => self.candidate_limit(vocab),
                StatsWindow::PerBatch => self.batch_size.min(self.candidate_limit(vocab)),
            };
            if window < 2 {
                return Err(Error::InvalidConfig(
                    "heuristic threshold needs at least two distances per statistics window".into(),
                ));
            }
        }
        Ok(())
    }

    /// Candidates examined per position after truncation.
    pub fn candidate_limit(&self, vocab: usize) -> usize {
        ((vocab as f64 * self.vocab_fraction).ceil() as usize).clamp(1, vocab)
    }
}

/// One token's keys and values, concatenated over kv-heads.
#[derive(Debug, Clone, Copy)]
pub struct TokenSlice<'a> {
    pub keys: &'a [f64],
    pub values: &'a [f64],
}

fn frobenius_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `‖K_local − K_target‖_F + ‖V_local − V_target‖_F`, or one of the terms.
pub fn collision_distance(local: TokenSlice<'_>, target: TokenSlice<'_>, parts: DistanceParts) -> Result<f64> {
    if local.keys.len() != target.keys.len() || local.values.len() != target.values.len() {
        return Err(Error::DimensionMismatch(format!(
            "slices of {}+{} and {}+{} elements",
            local.keys.len(),
            local.values.len(),
            target.keys.len(),
            target.values.len()
        )));
    }
    let dk = || frobenius_diff(local.keys, target.keys);
    let dv = || frobenius_diff(local.values, target.values);
    Ok(match parts {
        DistanceParts::Both => dk() + dv(),
        DistanceParts::KeysOnly => dk(),
        DistanceParts::ValuesOnly => dv(),
    })
}

/// Candidate order at the next position: descending attacker probability,
/// ties by token id. Without a prefix the order is by token id.
pub fn candidate_order<T: Scalar>(cache: &PagedKvCache<T>, vocab: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..vocab as u32).collect();
    if let Some(logits) = cache.next_logits() {
        order.sort_by(|&a, &b| {
            logits[b as usize].partial_cmp(&logits[a as usize]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
    }
    order
}

struct Prober<'m, T> {
    model: &'m Model<T>,
    layer: usize,
    parts: DistanceParts,
}

impl<T: Scalar> Prober<'_, T> {
    fn distance(&self, prefix: &PagedKvCache<T>, token: u32, target: TokenSlice<'_>) -> Result<f64> {
        let (keys, values) = self.model.probe_kv(prefix, token, self.layer)?;
        let keys: Vec<f64> = keys.iter().flatten().map(|x| x.as_f64()).collect();
        let values: Vec<f64> = values.iter().flatten().map(|x| x.as_f64()).collect();
        collision_distance(TokenSlice { keys: &keys, values: &values }, target, self.parts)
    }
}

/// Runs the collision attack against the blocks of `params.layer`.
/// `truth` only feeds the instrumentation fields of the report.
pub fn collision_attack<T: Scalar>(
    target: &[KvBlock<T>],
    attacker: &Model<T>,
    params: &CollisionParams,
    truth: Option<&[u32]>,
) -> Result<AttackReport> {
    let start = Instant::now();
    let vocab = attacker.config().vocab;
    params.validate(vocab)?;
    let slices = LayerSlices::from_blocks(target)?;
    if let Some(b) = target.first() {
        if b.layer != params.layer {
            return Err(Error::InvalidConfig(format!("blocks come from layer {}, params name {}", b.layer, params.layer)));
        }
    }
    let prober = Prober { model: attacker, layer: params.layer, parts: params.parts };
    let limit = params.candidate_limit(vocab);
    let mut prefix = attacker.new_cache();
    let mut records = Vec::with_capacity(slices.len());
    for pos in 0..slices.len() {
        let target_slice = TokenSlice { keys: &slices.keys[pos], values: &slices.values[pos] };
        let order = candidate_order(&prefix, vocab);
        let mut seen: Vec<(u32, f64)> = Vec::new();
        let mut stats = RunningStats::default();
        let mut accepted = None;
        'batches: for batch in order[..limit].chunks(params.batch_size) {
            if params.window == StatsWindow::PerBatch {
                stats = RunningStats::default();
            }
            let first = seen.len();
            for &tok in batch {
                let d = prober.distance(&prefix, tok, target_slice)?;
                stats.push(d);
                seen.push((tok, d));
            }
            let threshold = match params.threshold_mode {
                ThresholdMode::Heuristic => match stats.std() {
                    Some(s) => stats.mean() - params.sigma_multiplier * s,
                    None => continue,
                },
                ThresholdMode::Enhanced { threshold, .. } => threshold,
            };
            // The batch is judged as a whole: its most extreme outlier wins.
            let outlier = seen
                .iter()
                .enumerate()
                .skip(first)
                .filter(|(_, &(_, d))| d < threshold)
                .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1));
            if let Some((i, &(tok, _))) = outlier {
                accepted = Some((tok, i + 1));
                break 'batches;
            }
        }
        let (token, rank, decision) = match accepted {
            Some((tok, rank)) => (tok, rank, Decision::Outlier),
            None => {
                let (i, &(tok, _)) = seen
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap_or(std::cmp::Ordering::Equal))
                    .ok_or_else(|| Error::InvalidConfig("no candidates evaluated".into()))?;
                (tok, i + 1, Decision::Fallback)
            }
        };
        let mut record = PositionRecord {
            token,
            decision,
            rank: Some(rank),
            candidates_scanned: seen.len(),
            mu_other: None,
            sigma_other: None,
            dis_target: None,
            true_rank: None,
        };
        let true_token = truth.and_then(|t| t.get(pos).copied());
        let mut others = RunningStats::default();
        seen.iter().filter(|(t, _)| Some(*t) != true_token).for_each(|&(_, d)| others.push(d));
        record.mu_other = (others.count() > 0).then(|| others.mean());
        record.sigma_other = others.std();
        if let Some(tt) = true_token {
            record.true_rank = order.iter().position(|&t| t == tt).map(|i| i + 1);
            record.dis_target = Some(match seen.iter().find(|(t, _)| *t == tt) {
                Some(&(_, d)) => d,
                None => prober.distance(&prefix, tt, target_slice)?,
            });
        }
        records.push(record);
        if pos + 1 < slices.len() {
            attacker.decode_step(&mut prefix, token)?;
        }
    }
    let mut report = AttackReport::new(records, start.elapsed().as_secs_f64()).scored(truth);
    report.protected_input = target.iter().any(|b| b.state != BlockState::Plaintext);
    Ok(report)
}

/// Result of fitting the prior-knowledge threshold on chosen plaintexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancedCalibration {
    pub target_samples: Vec<f64>,
    pub other: DistanceStats,
    pub true_ranks: Vec<usize>,
    /// Median observed rank of the true token.
    pub rank: usize,
    pub choice: ThresholdChoice,
}

impl EnhancedCalibration {
    pub fn mode(&self) -> ThresholdMode {
        ThresholdMode::Enhanced { rank: self.rank, threshold: self.choice.threshold }
    }
}

/// Fits the enhanced threshold from known inputs and the target caches they
/// produced. Each position is scored with the true prefix; the other
/// distances are those of the first batch of candidates.
pub fn calibrate_enhanced<T: Scalar>(
    attacker: &Model<T>,
    known: &[(Vec<u32>, Vec<KvBlock<T>>)],
    params: &CollisionParams,
) -> Result<EnhancedCalibration> {
    let vocab = attacker.config().vocab;
    params.validate(vocab)?;
    let prober = Prober { model: attacker, layer: params.layer, parts: params.parts };
    let per_position = params.batch_size.min(params.candidate_limit(vocab));
    let mut target_samples = Vec::new();
    let mut others = Vec::new();
    let mut true_ranks = Vec::new();
    for (tokens, blocks) in known {
        let slices = LayerSlices::from_blocks(blocks)?;
        if slices.len() != tokens.len() {
            return Err(Error::DimensionMismatch("known input and cache lengths differ".into()));
        }
        let mut prefix = attacker.new_cache();
        for (pos, &tok) in tokens.iter().enumerate() {
            let target = TokenSlice { keys: &slices.keys[pos], values: &slices.values[pos] };
            let order = candidate_order(&prefix, vocab);
            true_ranks.push(order.iter().position(|&t| t == tok).map_or(vocab, |i| i + 1));
            target_samples.push(prober.distance(&prefix, tok, target)?);
            for &cand in order.iter().filter(|&&t| t != tok).take(per_position) {
                others.push(prober.distance(&prefix, cand, target)?);
            }
            attacker.decode_step(&mut prefix, tok)?;
        }
    }
    let other = DistanceStats::from_distances(others)
        .ok_or_else(|| Error::InvalidConfig("calibration produced fewer than two distances".into()))?;
    let mut sorted = true_ranks.clone();
    sorted.sort_unstable();
    let rank = sorted.get(sorted.len() / 2).copied().unwrap_or(1);
    let choice = enhanced_threshold(&target_samples, &other, rank);
    Ok(EnhancedCalibration { target_samples, other, true_ranks, rank, choice })
}
