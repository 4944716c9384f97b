use serde::{Deserialize, Serialize};

use super::metrics::{exact_match, rouge_l};

/// How a position's token was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    /// Distance fell below the acceptance threshold.
    Outlier,
    /// No candidate passed; the global minimum was taken.
    Fallback,
    /// Recovered algebraically or generated, no search involved.
    Direct,
}

/// Per-position attack trace. Fields derived from the ground truth are
/// instrumentation only and never influence decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRecord {
    pub token: u32,
    pub decision: Decision,
    /// 1-based rank of the chosen token in the candidate order.
    pub rank: Option<usize>,
    pub candidates_scanned: usize,
    pub mu_other: Option<f64>,
    pub sigma_other: Option<f64>,
    pub dis_target: Option<f64>,
    /// 1-based rank of the true token in the candidate order.
    pub true_rank: Option<usize>,
}

impl PositionRecord {
    pub fn direct(token: u32) -> Self {
        Self {
            token,
            decision: Decision::Direct,
            rank: None,
            candidates_scanned: 0,
            mu_other: None,
            sigma_other: None,
            dis_target: None,
            true_rank: None,
        }
    }

    /// `|dis_target − μ_other| / σ_other` when all three are known.
    pub fn target_z_score(&self) -> Option<f64> {
        match (self.dis_target, self.mu_other, self.sigma_other) {
            (Some(t), Some(m), Some(s)) if s > 0.0 => Some((t - m).abs() / s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub reconstructed: Vec<u32>,
    pub per_position: Vec<PositionRecord>,
    pub exact_match: Option<f64>,
    pub rouge_l: Option<f64>,
    pub wall_time: f64,
    /// Set when the attacked cache held protected blocks.
    #[serde(default)]
    pub protected_input: bool,
}

impl AttackReport {
    pub fn new(per_position: Vec<PositionRecord>, wall_time: f64) -> Self {
        Self {
            reconstructed: per_position.iter().map(|p| p.token).collect(),
            per_position,
            exact_match: None,
            rouge_l: None,
            wall_time,
            protected_input: false,
        }
    }

    /// Fills the metrics against a reference sequence.
    pub fn score(&mut self, truth: &[u32]) {
        self.exact_match = Some(exact_match(&self.reconstructed, truth));
        self.rouge_l = Some(rouge_l(&self.reconstructed, truth));
    }

    pub fn scored(mut self, truth: Option<&[u32]>) -> Self {
        if let Some(t) = truth {
            self.score(t);
        }
        self
    }

    pub fn fallback_count(&self) -> usize {
        self.per_position.iter().filter(|p| p.decision == Decision::Fallback).count()
    }
}
