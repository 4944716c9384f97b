//! Versioned machine-readable results of a matrix run.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::attacks::AttackReport;
use crate::cloak::FlopModel;
use crate::error::Result;

pub const REPORT_SCHEMA: u32 = 1;

/// One attack run on one corpus item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub defense: String,
    pub attack: String,
    pub layer: Option<usize>,
    pub trial: usize,
    /// Set when the trial aborted; the metric fields are then empty.
    pub error: Option<String>,
    pub report: Option<AttackReport>,
}

impl TrialRecord {
    pub fn exact_match(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.exact_match)
    }

    pub fn rouge_l(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.rouge_l)
    }

    /// Standardized distances of the true token, where recorded.
    pub fn target_z_scores(&self) -> Vec<f64> {
        self.report
            .as_ref()
            .map(|r| r.per_position.iter().filter_map(|p| p.target_z_score()).collect())
            .unwrap_or_default()
    }

    fn cell(&self) -> (&str, &str, Option<usize>) {
        (&self.defense, &self.attack, self.layer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; zero for fewer than two values.
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std, count: values.len() })
    }
}

/// Aggregate of one (defense, attack, layer) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellAggregate {
    pub defense: String,
    pub attack: String,
    pub layer: Option<usize>,
    pub trials: usize,
    pub errors: usize,
    pub exact_match: Option<Summary>,
    pub rouge_l: Option<Summary>,
    /// Positions with a recorded true-token z-score, and how many of them
    /// fell outside three standard deviations.
    pub z_positions: usize,
    pub z_outside_3sigma: usize,
    pub max_target_z: Option<f64>,
}

pub fn aggregate(trials: &[TrialRecord]) -> Vec<CellAggregate> {
    let mut cells: Vec<(&str, &str, Option<usize>)> = Vec::new();
    for t in trials {
        if !cells.contains(&t.cell()) {
            cells.push(t.cell());
        }
    }
    cells
        .into_iter()
        .map(|cell| {
            let rows: Vec<&TrialRecord> = trials.iter().filter(|t| t.cell() == cell).collect();
            let em: Vec<f64> = rows.iter().filter_map(|t| t.exact_match()).collect();
            let rl: Vec<f64> = rows.iter().filter_map(|t| t.rouge_l()).collect();
            let z: Vec<f64> = rows.iter().flat_map(|t| t.target_z_scores()).collect();
            CellAggregate {
                defense: cell.0.to_string(),
                attack: cell.1.to_string(),
                layer: cell.2,
                trials: rows.len(),
                errors: rows.iter().filter(|t| t.error.is_some()).count(),
                exact_match: Summary::of(&em),
                rouge_l: Summary::of(&rl),
                z_positions: z.len(),
                z_outside_3sigma: z.iter().filter(|&&v| v > 3.0).count(),
                max_target_z: z.iter().copied().reduce(f64::max),
            }
        })
        .collect()
}

/// Effect of a defense on the served model's predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityRecord {
    pub defense: String,
    /// Mean `KL(plaintext ‖ defended)` of next-token distributions.
    pub mean_kl: f64,
    pub max_logit_diff: f64,
    /// Fraction of positions whose greedy token is unchanged.
    pub top1_agreement: f64,
    pub positions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseTiming {
    pub defense: String,
    /// Median seconds of a prefill plus decode workload.
    pub seconds: f64,
    /// `defended / plaintext − 1`.
    pub overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObfuscationTiming {
    /// Median seconds to cloak every block of one cache, fused weights.
    pub fused_seconds: f64,
    /// Same workload with `M1`/`M2` multiplied in online.
    pub unfused_seconds: f64,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overheads {
    pub plaintext_seconds: f64,
    pub defenses: Vec<DefenseTiming>,
    pub obfuscation: Option<ObfuscationTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub config: ExperimentConfig,
    pub trials: Vec<TrialRecord>,
    pub aggregates: Vec<CellAggregate>,
    pub utility: Vec<UtilityRecord>,
    pub flops: FlopModel,
    pub overheads: Option<Overheads>,
    pub wall_time: f64,
}

impl Report {
    pub fn aborted_trials(&self) -> usize {
        self.trials.iter().filter(|t| t.error.is_some()).count()
    }

    pub fn cell(&self, defense: &str, attack: &str, layer: Option<usize>) -> Option<&CellAggregate> {
        self.aggregates.iter().find(|c| c.defense == defense && c.attack == attack && c.layer == layer)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Flat table with one row per trial.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("defense,attack,layer,trial,exact_match,rouge_l,wall_time,fallbacks,max_target_z,error\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &self.trials {
            let z = t.target_z_scores().into_iter().reduce(f64::max);
            let (wall, fallbacks) =
                t.report.as_ref().map_or((None, String::new()), |r| (Some(r.wall_time), r.fallback_count().to_string()));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                csv_field(&t.defense),
                csv_field(&t.attack),
                t.layer.map(|l| l.to_string()).unwrap_or_default(),
                t.trial,
                opt(t.exact_match()),
                opt(t.rouge_l()),
                opt(wall),
                fallbacks,
                opt(z),
                csv_field(t.error.as_deref().unwrap_or("")),
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `report` as JSON to `path` and, when given, the per-trial CSV.
pub fn emit_report(report: &Report, path: impl AsRef<Path>, csv: Option<&Path>) -> Result<()> {
    std::fs::write(path, report.to_json()? + "\n")?;
    if let Some(csv) = csv {
        std::fs::write(csv, report.to_csv())?;
    }
    Ok(())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<Report> {
    Report::from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std, s.count), (2.0, 1.0, 3));
        assert_eq!(Summary::of(&[4.0]).unwrap().std, 0.0);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn csv_quotes_awkward_fields() {
        assert_eq!(csv_field("dp(eps=1e0)"), "dp(eps=1e0)");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"x\""), "\"say \"\"x\"\"\"");
    }
}
