//! Experiment runner: corpora, defense × attack matrices, utility and timing
//! measurements, and JSON/CSV reports.

mod config;
mod corpus;
mod report;
mod runner;

pub use config::{
    AttackSpec, CorpusConfig, CorpusSource, DefenseSpec, ExperimentConfig, LayerChoice, Precision, SeedTree, Stream,
    TimingConfig, CONFIG_SCHEMA,
};
pub use corpus::{generate_corpus, sample_from_model};
pub use report::{
    aggregate, emit_report, load_report, CellAggregate, DefenseTiming, ObfuscationTiming, Overheads, Report, Summary,
    TrialRecord, UtilityRecord, REPORT_SCHEMA,
};
pub use runner::{kl_divergence, median_time, run_matrix};
