use std::path::Path;

use kvcloak::harness::{aggregate, emit_report, load_report, run_matrix, CorpusConfig, ExperimentConfig, Report, TimingConfig};
use kvcloak::model::ModelConfig;
use kvcloak::Error;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default_matrix(7);
    cfg.model = ModelConfig { layers: 3, hidden: 32, heads: 2, kv_heads: 2, head_dim: 16, vocab: 96, block_size: 8, ..cfg.model };
    cfg.corpus = CorpusConfig { count: 2, min_len: 6, max_len: 12, ..cfg.corpus };
    cfg.calibration = CorpusConfig { count: 2, min_len: 6, max_len: 12, ..cfg.calibration };
    cfg.timing = None;
    cfg
}

fn without_wall_clock(mut r: Report) -> Report {
    r.wall_time = 0.0;
    r.overheads = None;
    for t in &mut r.trials {
        if let Some(rep) = &mut t.report {
            rep.wall_time = 0.0;
        }
    }
    r
}

#[test]
fn report_roundtrip_csv_and_config_echo() {
    let cfg = tiny_config();
    let report = run_matrix(&cfg).unwrap();
    assert_eq!(report.aborted_trials(), 0, "{:?}", report.trials.iter().find_map(|t| t.error.clone()));
    assert_eq!(report.config, cfg);

    // 3 defenses × (2 layered attacks × 3 layers + injection) cells × 2 items.
    let cells = 3 * (2 * 3 + 1);
    assert_eq!(report.aggregates.len(), cells);
    assert_eq!(report.trials.len(), cells * cfg.corpus.count);
    assert_eq!(report.to_csv().lines().count(), 1 + report.trials.len());
    assert_eq!(aggregate(&report.trials), report.aggregates);

    let dir = tempfile::tempdir().unwrap();
    let (json, csv) = (dir.path().join("r.json"), dir.path().join("r.csv"));
    emit_report(&report, &json, Some(&csv)).unwrap();
    let first = std::fs::read(&json).unwrap();
    let parsed = load_report(&json).unwrap();
    emit_report(&parsed, &json, None).unwrap();
    assert_eq!(std::fs::read(&json).unwrap(), first);
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), report.to_csv());

    let rerun = run_matrix(&parsed.config).unwrap();
    assert_eq!(without_wall_clock(rerun), without_wall_clock(report));
}

#[test]
fn plaintext_first_layer_inversion_is_exact() {
    let mut cfg = tiny_config();
    cfg.attacks.truncate(1);
    cfg.defenses.truncate(2);
    let report = run_matrix(&cfg).unwrap();
    let em = |defense: &str| report.cell(defense, "inversion(exact)", Some(0)).unwrap().exact_match.unwrap().mean;
    assert_eq!(em("plaintext"), 1.0);
    assert!(em("kvcloak") <= 5.0 / cfg.model.vocab as f64);
}

#[test]
fn timing_fields_are_finite() {
    let mut cfg = tiny_config();
    cfg.attacks.truncate(1);
    cfg.layers.truncate(1);
    cfg.timing = Some(TimingConfig { repetitions: 5, prompt_len: 20, decode_tokens: 4 });
    let o = run_matrix(&cfg).unwrap().overheads.unwrap();
    assert_eq!(o.defenses.len(), 3);
    assert!(o.defenses.iter().all(|d| d.overhead.is_finite() && d.seconds > 0.0));
    let ob = o.obfuscation.unwrap();
    assert!(ob.fused_seconds > 0.0 && ob.unfused_seconds > 0.0);
}

#[test]
fn failing_trials_are_recorded_not_fatal() {
    let mut cfg = tiny_config();
    // Exact inversion needs a square key projection; grouped heads abort it.
    cfg.model.heads = 4;
    cfg.model.head_dim = 8;
    cfg.model.block_size = 4;
    cfg.model.kv_heads = 2;
    cfg.attacks.truncate(1);
    cfg.defenses.truncate(1);
    let report = run_matrix(&cfg).unwrap();
    assert_eq!(report.aborted_trials(), report.trials.len());
    assert!(report.trials[0].error.as_deref().unwrap().contains("unsupported"));
    assert!(report.to_csv().lines().skip(1).all(|l| l.contains("square key projection")));
}

#[test]
fn unwritable_report_path_is_an_io_error() {
    let report = run_matrix(&ExperimentConfig { attacks: Vec::new(), ..tiny_config() }).unwrap();
    let err = emit_report(&report, Path::new("/nonexistent-dir/r.json"), None).unwrap_err();
    assert!(matches!(err, Error::Io(_)));
}

#[test]
fn bundled_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 5);
    let default = ExperimentConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json")).unwrap();
    assert_eq!(default, ExperimentConfig::default_matrix(1));
}
