use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Parser;
use es2emb_cli::{run, Cli, Exit};
use es2emb_core::embedder::load_matrix;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

/// A small config over the bundled alpha dataset, written into `dir`.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let data = data_dir().join("synthetic50");
    let text = format!(
        r#"schema_version = 1
seed = 3
output_dir = "out"
k = 8

[[datasets]]
name = "alpha"
schema = "{schema}"
events = "{events}"
labels = "{labels}"

[model]
n_layers = 2
hidden_dim = 16
n_heads = 2
context_len = 512

[train]
epochs = 1
learning_rate = 3e-3
{extra}
"#,
        schema = data.join("schema.toml").display(),
        events = data.join("events.csv").display(),
        labels = data.join("labels.csv").display(),
    );
    let path = dir.join("es2emb.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn cli(config: &Path, args: &[&str]) -> Cli {
    let mut argv = vec!["es2emb", "-c", config.to_str().unwrap()];
    argv.extend_from_slice(args);
    Cli::parse_from(argv)
}

#[test]
fn pipeline_then_idempotent_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let (exit, stats) = run(cli(&config, &["--stub-llm", "pipeline"]));
    assert_eq!(exit, Exit::Ok);
    assert_eq!(stats.llm_requests, 50);
    assert_eq!(stats.models_trained, 1);
    let out = dir.path().join("out");
    let emb = load_matrix(&out.join("embed/alpha.emb")).unwrap();
    assert_eq!((emb.len(), emb.dim()), (50, 16));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report["per_fold"].as_array().unwrap().len(), 5);
    for stage in ["serialize", "enrich", "train", "embed", "eval"] {
        assert!(out.join(stage).join("stage.json").is_file(), "{stage}");
    }
    let before = std::fs::read(out.join("eval/report.json")).unwrap();

    let (exit, stats) = run(cli(&config, &["--stub-llm", "pipeline"]));
    assert_eq!(exit, Exit::Ok);
    assert_eq!((stats.llm_requests, stats.models_trained, stats.stages_run.len()), (0, 0, 0));
    assert_eq!(stats.stages_skipped.len(), 5);

    let (exit, stats) = run(cli(&config, &["--stub-llm", "--force", "pipeline"]));
    assert_eq!(exit, Exit::Ok);
    assert_eq!((stats.llm_requests, stats.models_trained), (0, 1), "cache still serves the corpus");
    assert_eq!(std::fs::read(out.join("eval/report.json")).unwrap(), before);

    let (exit, _) = run(cli(&config, &["--stub-llm", "ablate", "datasize"]));
    assert_eq!(exit, Exit::Ok);
    assert!(out.join("ablate/datasize/datasize.csv").is_file());
}

#[test]
fn changed_config_reruns_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    assert_eq!(run(cli(&config, &["--stub-llm", "pipeline"])).0, Exit::Ok);
    let config = write_config(dir.path(), "\n[eval]\nn_folds = 3\n");
    let (exit, stats) = run(cli(&config, &["--stub-llm", "pipeline"]));
    assert_eq!(exit, Exit::Ok);
    assert_eq!(stats.stages_run, vec!["eval".to_string()]);
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_es2emb");

    let config = write_config(dir.path(), "");
    let text = std::fs::read_to_string(&config).unwrap().replace("k = 8\n", "");
    std::fs::write(&config, text).unwrap();
    let out = Command::new(bin).args(["-c", config.to_str().unwrap(), "pipeline"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("config error: k:"), "{stderr}");

    let config = write_config(dir.path(), "");
    let out = Command::new(bin).args(["-c", config.to_str().unwrap(), "train"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage train failed"));
}

#[test]
fn unreachable_endpoint_leaves_failed_marker() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "\n[endpoint]\nmax_attempts = 1\nbackoff_ms = 1\ntimeout_secs = 2\n");
    let out = Command::new(env!("CARGO_BIN_EXE_es2emb"))
        .args(["-c", config.to_str().unwrap(), "enrich"])
        .env("ES2EMB_ENDPOINT", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage enrich failed"));
    let enrich = dir.path().join("out/enrich");
    assert!(enrich.join(".failed").is_file());
    assert!(!enrich.join("stage.json").exists());

    // the stub succeeds afterwards and clears the marker
    assert_eq!(run(cli(&config, &["--stub-llm", "enrich"])).0, Exit::Ok);
    assert!(!enrich.join(".failed").exists());
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("s");
    let out = Command::new(env!("CARGO_BIN_EXE_es2emb"))
        .args(["synth", "--out", target.to_str().unwrap(), "--users", "12", "--seed", "4"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let (ds, _) = es2emb_core::synthetic::load_synthetic(&target, "s").unwrap();
    assert_eq!(ds.sequences.len(), 12);
}

#[test]
fn ensemble_concatenates_configured_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    assert_eq!(run(cli(&config, &["--stub-llm", "pipeline"])).0, Exit::Ok);
    let own = dir.path().join("out/embed/alpha.emb");
    let extra = dir.path().join("extra.emb");
    std::fs::copy(&own, &extra).unwrap();
    let config = write_config(dir.path(), &format!("\n[ensemble]\ninputs = [\"{}\"]\n", extra.display()));
    let (exit, stats) = run(cli(&config, &["--stub-llm", "pipeline"]));
    assert_eq!(exit, Exit::Ok);
    assert_eq!(stats.stages_run, vec!["ensemble".to_string(), "eval".to_string()]);
    let cat = load_matrix(&dir.path().join("out/ensemble/ensemble.emb")).unwrap();
    assert_eq!(cat.dim(), 32);
}
