use std::path::Path;
use std::process::{Command, Output};

fn kvcloak(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvcloak")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = kvcloak(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn pipeline_from_weights_to_attacks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (w, c, cal, k, fw) = (p(d, "w.bin"), p(d, "c.json"), p(d, "cal.json"), p(d, "k.bin"), p(d, "fw.bin"));
    ok(&["gen-weights", "--seed", "1", "--out", &w]);
    ok(&["gen-corpus", "--seed", "2", "--weights", &w, "--count", "2", "--min-len", "20", "--max-len", "24", "--out", &c]);
    ok(&["gen-corpus", "--seed", "3", "--weights", &w, "--count", "4", "--out", &cal]);
    ok(&["keygen", "--seed", "4", "--weights", &w, "--calibration", &cal, "--out-key", &k, "--out-weights", &fw]);
    let fused_again = p(d, "fw2.bin");
    ok(&["fuse", "--weights", &w, "--key", &k, "--out", &fused_again]);
    assert_eq!(std::fs::read(&fw).unwrap(), std::fs::read(&fused_again).unwrap());

    let (plain, fused, cloaked) = (p(d, "plain.bin"), p(d, "fused.bin"), p(d, "cloaked.bin"));
    ok(&["prefill", "--weights", &w, "--corpus", &c, "--out", &plain]);
    ok(&["prefill", "--weights", &fw, "--corpus", &c, "--out", &fused]);
    ok(&["cloak", "--cache", &fused, "--key", &k, "--epoch", "3", "--out", &cloaked]);
    ok(&["decloak", "--cache", &cloaked, "--key", &k, "--original-order", "--out", &p(d, "restored.bin")]);

    let attack = |cache: &str, out: &str| {
        ok(&["attack", "--cache", cache, "--weights", &w, "--kind", "inversion", "--truth", &c, "--truth-index", "0", "--out", out]);
        let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
        report["exact_match"].as_f64().unwrap()
    };
    assert_eq!(attack(&plain, &p(d, "a.json")), 1.0);
    assert!(attack(&cloaked, &p(d, "b.json")) < 0.1);
}

#[test]
fn generation_verbs_require_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = kvcloak(&["gen-weights", "--out", &p(dir.path(), "w.bin")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--seed"));
}

#[test]
fn flops_prints_exact_counts() {
    let json: serde_json::Value = serde_json::from_str(&ok(&["flops", "--block-size", "16"])).unwrap();
    assert_eq!(json["naive_mults"], 593_920);
    assert_eq!(json["fused_mults"], 69_632);
    assert_eq!(json["recompute_mults"], 8_388_608);
}

#[test]
fn matrix_writes_reports_and_report_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = p(d, "cfg.json");
    let mut cfg: serde_json::Value = serde_json::from_str(&ok(&["default-config", "--seed", "3"])).unwrap();
    cfg["corpus"]["count"] = 1.into();
    cfg["calibration"]["count"] = 1.into();
    cfg["timing"] = serde_json::Value::Null;
    cfg["attacks"] = serde_json::json!([{ "kind": "inversion", "mode": "exact" }]);
    std::fs::write(&config, cfg.to_string()).unwrap();
    let (json, csv) = (p(d, "r.json"), p(d, "r.csv"));
    let table = ok(&["matrix", "--config", &config, "--out", &json, "--csv", &csv]);
    assert!(table.contains("inversion(exact)"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 3 * 3);
    let again = p(d, "again.csv");
    ok(&["report", &json, "--csv", &again]);
    assert_eq!(std::fs::read(&csv).unwrap(), std::fs::read(&again).unwrap());

    // Exact inversion is unsupported on grouped heads, so every trial aborts.
    cfg["model"]["kv_heads"] = 1.into();
    std::fs::write(&config, cfg.to_string()).unwrap();
    let out = kvcloak(&["matrix", "--config", &config, "--out", &json]);
    assert!(!out.status.success());
}
