use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spectral-erc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn small_corpus(dir: &Path) -> String {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, r#"{"n_train": 6, "n_val": 3, "n_test": 3, "max_utterances": 10}"#).unwrap();
    let corpus = dir.join("corpus.json");
    let out = run(&["synth", "--spec", spec.to_str().unwrap(), "--out", corpus.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    corpus.to_str().unwrap().to_string()
}

fn quick_config(dir: &Path) -> String {
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 5, "model": {"d_model": 8, "depth": 2}, "train": {"epochs": 3}}"#).unwrap();
    cfg.to_str().unwrap().to_string()
}

#[test]
fn help_prints_usage() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Usage:"));
    for cmd in ["synth", "train", "eval", "bench", "spectrum", "params-count", "probe"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
}

#[test]
fn missing_files_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let missing = missing.to_str().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    for args in [
        vec!["train", "--corpus", missing, "--out", ckpt.to_str().unwrap()],
        vec!["eval", "--corpus", missing, "--checkpoint", missing],
        vec!["synth", "--spec", missing, "--out", ckpt.to_str().unwrap()],
        vec!["params-count", "--config", missing],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
    }
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"d_model": 3}}"#).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    assert_eq!(run(&["train", "--corpus", &corpus, "--out", ckpt, "--mode", "dense"]).status.code(), Some(2));
    assert_eq!(
        run(&["train", "--corpus", &corpus, "--out", ckpt, "--config", bad.to_str().unwrap()]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bench_reports_equivalence_residual() {
    let out = run(&["bench", "--sizes", "8", "--d", "4", "--repeats", "1"]);
    assert!(out.status.success());
    let csv = String::from_utf8_lossy(&out.stdout);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,d,residual,spatial_secs,frequency_secs"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "8");
    let residual: f64 = row[2].parse().unwrap();
    assert!(residual <= 1e-8, "residual {residual}");
}

#[test]
fn train_is_byte_reproducible_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg = quick_config(dir.path());
    let mut logs = Vec::new();
    for k in 0..2 {
        let ckpt = dir.path().join(format!("m{k}.ckpt"));
        let out = run(&["train", "--corpus", &corpus, "--config", &cfg, "--deterministic", "--out", ckpt.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        logs.push(std::fs::read(dir.path().join(format!("m{k}.ckpt.log.jsonl"))).unwrap());
        assert!(dir.path().join(format!("m{k}.ckpt.config.json")).exists());
    }
    assert!(!logs[0].is_empty());
    assert_eq!(logs[0], logs[1]);
    assert_eq!(
        std::fs::read(dir.path().join("m0.ckpt")).unwrap(),
        std::fs::read(dir.path().join("m1.ckpt")).unwrap()
    );

    let report = dir.path().join("report.json");
    let out = run(&[
        "eval",
        "--corpus",
        &corpus,
        "--checkpoint",
        dir.path().join("m0.ckpt").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("w-avg"));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    let wf1 = doc["metrics"]["weighted_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&wf1));
    assert_eq!(doc["config"]["seed"], 5);
}

#[test]
fn spectrum_lists_eigenvalues_in_range() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let out = run(&["spectrum", "--corpus", &corpus, "--dump-dir", dir.path().join("dump").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8_lossy(&out.stdout);
    let mut n_eig = 0;
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[0] == "eigenvalue" {
            n_eig += 1;
            for v in &f[2..] {
                let v: f64 = v.parse().unwrap();
                assert!((-1e-9..=2.0 + 1e-9).contains(&v));
            }
        }
    }
    assert!(n_eig > 0 && n_eig % 3 == 0);
    assert!(dir.path().join("dump/low_pass.csv").exists());
}

#[test]
fn params_count_shrinks_under_ablation() {
    let total = |args: &[&str]| -> usize {
        let out = run(args);
        assert!(out.status.success());
        let text = String::from_utf8_lossy(&out.stdout).to_string();
        let last = text.lines().last().unwrap().to_string();
        last.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    let full = total(&["params-count"]);
    assert!(total(&["params-count", "--ablate", "high"]) < full);
    assert!(total(&["params-count", "--mode", "circulant"]) < full);
}

#[test]
fn probe_reports_each_depth() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg = quick_config(dir.path());
    let out = run(&["probe", "--corpus", &corpus, "--config", &cfg, "--depths", "1,2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        let cos: f64 = f[1].parse().unwrap();
        assert!((-1.0..=1.0).contains(&cos));
        assert_eq!(f[3], "true");
    }
}
