use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const QUICK: &str = include_str!("../configs/quick.toml");

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!("{extra}\n{QUICK}");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(stage: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memforecast"))
        .arg(stage)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env("RUST_LOG", "warn")
        .env_remove("MEMFORECAST_THREADS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_memory_checkpoint_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("run");
    for stage in ["synth", "build-kb"] {
        let o = run(stage, &cfg, &out, &[]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let o = run("train-fusion", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("kpm.ckpt"), "{err}");
    assert!(!out.join("fusion.ckpt").exists());
}

#[test]
fn stage_output_is_json_and_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("run");
    let mut reports = Vec::new();
    for _ in 0..2 {
        for stage in ["synth", "build-kb", "train-kpm", "train-fusion", "forecast"] {
            let o = run(stage, &cfg, &out, &["--k", "2", "--plot-data"]);
            assert!(o.status.success(), "{stage}: {}", stderr(&o));
            let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
            assert_eq!(v["stage"], stage);
        }
        reports.push(std::fs::read(out.join("metrics.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let metrics: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(metrics["kind"], "metrics");
    assert_eq!(metrics["report"]["candidates"], 2);
    assert!(out.join("plot_forecast.csv").exists());
}

#[test]
fn seed_flag_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run("synth", &cfg, &a, &["--seed", "1"]).status.success());
    assert!(run("synth", &cfg, &b, &["--seed", "2"]).status.success());
    assert_ne!(std::fs::read(a.join("data.csv")).unwrap(), std::fs::read(b.join("data.csv")).unwrap());
}

#[test]
fn refuses_to_overwrite_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "overwrite = false");
    let out = dir.path().join("run");
    assert!(run("synth", &cfg, &out, &[]).status.success());
    let before = std::fs::read(out.join("data.csv")).unwrap();
    let o = run("synth", &cfg, &out, &["--seed", "99"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("data.csv"));
    assert_eq!(std::fs::read(out.join("data.csv")).unwrap(), before);
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = Command::new(env!("CARGO_BIN_EXE_memforecast"))
        .args(["synth", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run"))
        .env("MEMFORECAST_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let record: serde_json::Value = serde_json::from_str(stderr(&o).lines().last().unwrap()).unwrap();
    assert_eq!(record["error"], "config");
}

#[test]
fn missing_config_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("synth", &dir.path().join("nope.toml"), &dir.path().join("run"), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nope.toml"));
}
