use std::path::Path;
use std::process::{Command, Output};

use spikedist::aggregate::AggregateConfig;
use spikedist::experiments::{draw_shards, ExperimentConfig};
use spikedist::localnode::{ReportOptions, SpikeHint};
use spikedist::protocol::{run_round, Transport, WorkerTask};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spikedist"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn error_kind(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert!(v["message"].is_string());
    v["error"].as_str().unwrap().to_string()
}

const SMALL: &str = r#"{"p_grid":[20],"m_grid":[4],"spike":{"alpha":10,"side":"upper"},"reps":3,"master_seed":21}"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn worker_and_coordinator_processes_match_in_process_round() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "cfg.json", SMALL);
    let shards_dir = dir.path().join("shards");
    let out = run(&["simulate", "--config", &config, "--out", shards_dir.to_str().unwrap()]);
    assert!(out.status.success());

    let mut lines = String::new();
    for id in 0..4 {
        let shard = shards_dir.join(format!("shard-{id}.csv"));
        let out = run(&["worker", "--data", shard.to_str().unwrap(), "--worker-id", &id.to_string()]);
        assert!(out.status.success());
        lines.push_str(std::str::from_utf8(&out.stdout).unwrap());
    }
    let reports = write(dir.path(), "reports.jsonl", &lines);
    let out = run(&["coordinate", "--input", &reports]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();

    let cfg = ExperimentConfig::from_json(SMALL).unwrap();
    let tasks: Vec<WorkerTask> = draw_shards(&cfg, 20, 4, 0)
        .unwrap()
        .into_iter()
        .map(|dataset| WorkerTask {
            dataset,
            hint: SpikeHint::largest(),
            options: ReportOptions::default(),
            root: None,
        })
        .collect();
    let round = run_round(&tasks, &Transport::InProcess, &AggregateConfig::default()).unwrap();
    assert_eq!(result["alpha_tilde"].as_f64().unwrap().to_bits(), round.result.alpha_tilde.to_bits());
    assert_eq!(result["included_workers"], serde_json::json!([0, 1, 2, 3]));
}

#[test]
fn experiment_commands_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "cfg.json", SMALL);
    let table = dir.path().join("table.csv");
    assert!(run(&["mse-table", "--config", &config, "--out", table.to_str().unwrap()]).status.success());
    let text = std::fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().next().unwrap(), "p,m,reps,mse_pooled,mse_weighted,mse_avg,failures");
    assert_eq!(text.lines().count(), 2);

    // the seed flag overrides the configuration
    let a = run(&["mse-table", "--config", &config, "--seed", "1"]);
    let b = run(&["mse-table", "--config", &config, "--seed", "2"]);
    assert_ne!(a.stdout, b.stdout);
    assert_eq!(a.stdout, run(&["mse-table", "--config", &config, "--seed", "1"]).stdout);

    let out = run(&["initials", "--config", &config]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 4);

    let normal_cfg = write(
        dir.path(),
        "normal.json",
        r#"{"p_grid":[10],"m_grid":[2],"spike":{"alpha":10,"side":"upper"},"reps":300}"#,
    );
    let stem = dir.path().join("norm.csv");
    let out = run(&["normality", "--config", &normal_cfg, "--out", stem.to_str().unwrap()]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["ks"].as_f64().unwrap() < 1.0);
    let z = std::fs::read_to_string(dir.path().join("norm_z.csv")).unwrap();
    assert_eq!(z.lines().count(), 301);
    let bins = std::fs::read_to_string(dir.path().join("norm_bins.csv")).unwrap();
    assert_eq!(bins.lines().next().unwrap(), "lo,hi,count");
}

#[test]
fn errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(error_kind(&run(&["mse-table"])), "ConfigError");
    let bad = write(dir.path(), "bad.json", r#"{"p_grid":[],"m_grid":[2],"spike":{"alpha":10,"side":"upper"}}"#);
    assert_eq!(error_kind(&run(&["sweeps", "--config", &bad])), "ConfigError");
    let short = write(dir.path(), "short.json", r#"{"p_grid":[10],"m_grid":[2],"spike":{"alpha":10,"side":"upper"},"n_totals":[100,200]}"#);
    assert_eq!(error_kind(&run(&["rate", "--config", &short])), "InsufficientPoints");

    let junk = write(dir.path(), "junk.jsonl", "{\"worker_id\": 1,\n");
    assert_eq!(error_kind(&run(&["coordinate", "--input", &junk])), "ParseError");
    let extra = write(
        dir.path(),
        "extra.jsonl",
        r#"{"worker_id":0,"n":100,"y":0.2,"k":1,"j":1,"alpha_hat":10.0,"gamma4_hat":3.0,"u4sum_hat":null,"status":"ok","x":1}"#,
    );
    assert_eq!(error_kind(&run(&["coordinate", "--input", &extra])), "SchemaError");

    let csv = write(dir.path(), "data.csv", "a,b\n1,2\n3,oops\n");
    assert_eq!(error_kind(&run(&["analyze", "--data", &csv])), "NonNumericCell");
    let ragged = write(dir.path(), "ragged.csv", "a,b\n1,2\n3\n");
    assert_eq!(error_kind(&run(&["analyze", "--data", &ragged])), "MalformedCsv");
    let empty = write(dir.path(), "empty.csv", "");
    assert_eq!(error_kind(&run(&["analyze", "--data", &empty])), "EmptyFile");
    let small = write(dir.path(), "small.csv", "a,b,c\n1,2,3\n4,5,7\n1,0,0\n0,1,5\n2,2,1\n");
    assert_eq!(error_kind(&run(&["analyze", "--data", &small, "--m-grid", "2"])), "TooManyMachines");
}

#[test]
fn coordinate_reads_stdin_and_infers_dimension() {
    use std::io::Write;
    let lines = concat!(
        r#"{"worker_id":1,"n":200,"y":0.5,"k":1,"j":1,"alpha_hat":10.2,"gamma4_hat":3.0,"u4sum_hat":null,"status":"ok"}"#,
        "\n",
        r#"{"worker_id":0,"n":100,"y":1e-30,"k":1,"j":0,"alpha_hat":null,"gamma4_hat":null,"u4sum_hat":null,"status":"failed"}"#,
        "\n",
        r#"{"worker_id":2,"n":400,"y":0.25,"k":1,"j":1,"alpha_hat":9.8,"gamma4_hat":3.0,"u4sum_hat":null,"status":"ok"}"#,
        "\n"
    );
    let mut child = bin()
        .arg("coordinate")
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(lines.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["excluded_workers"], serde_json::json!([0]));
    assert_eq!(v["included_workers"], serde_json::json!([1, 2]));
    // ᾱ = 10, p = 100: ω ∝ (200·81 - 100, 400·81 - 100)
    let (a, b) = (200.0 * 81.0 - 100.0, 400.0 * 81.0 - 100.0);
    let expected = (a * 10.2 + b * 9.8) / (a + b);
    assert!((v["alpha_tilde"].as_f64().unwrap() - expected).abs() < 1e-12);
}
