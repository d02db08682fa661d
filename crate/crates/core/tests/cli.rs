use std::path::Path;
use std::process::{Command, Output};

fn unotb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unotb"))
        .args(args)
        .arg("--quiet")
        .current_dir(dir)
        .env("UNOTB_THREADS", "1")
        .output()
        .expect("spawn unotb")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const TOY: &str = r#"
seed = 1
batch_size = 64
iterations = 20
potential_hidden = [16]
map_hidden = [16]
k.1.dataset = "spiral"
k.1.lambda = 0.5
k.2.dataset = "gm8"
k.2.lambda = 0.5
k.2.divergence = "kl"
k.2.tau = 5
eval.n = 100
oracle.n = 100
"#;

#[test]
fn generate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "seed = 7\ngenerate.n = 1000\nk.1.dataset = \"imbalance_p1\"\nk.1.lambda = 1.0\n";
    write(dir.path(), "gen.toml", cfg);
    let a = unotb(dir.path(), &["generate", "--config", "gen.toml", "--out", "a"]);
    let b = unotb(dir.path(), &["generate", "--config", "gen.toml", "--out", "b"]);
    assert!(a.status.success() && b.status.success());
    let read = |d: &str| std::fs::read(dir.path().join(d).join("data/k1.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    let text = String::from_utf8(read("a")).unwrap();
    assert_eq!(text.lines().count(), 1000);
    assert!(text.lines().all(|l| l.split(',').count() == 2));
}

#[test]
fn header_flag() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "gen.toml", "generate.n = 5\nk.1.dataset = \"moons\"\nk.1.lambda = 1\n");
    let out = unotb(dir.path(), &["generate", "--config", "gen.toml", "--out", "o", "--header"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("o/data/k1.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("x1,x2"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn zero_inner_steps_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.toml", &format!("{TOY}\ninner_steps = 0\n"));
    let out = unotb(dir.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("N_T must be ≥ 1"));
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.toml", &format!("{TOY}\nk.1.temperature = 2\n"));
    let out = unotb(dir.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("k.1.temperature"));
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = unotb(dir.path(), &["train", "--config", "nope.toml"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
    write(dir.path(), "toy.toml", TOY);
    let out = unotb(dir.path(), &["eval", "--config", "toy.toml", "--out", "fresh"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint.bin"));
}

#[test]
fn bad_lambda_sum() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.toml", &TOY.replace("k.2.lambda = 0.5", "k.2.lambda = 0.7"));
    let out = unotb(dir.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "toy.toml", TOY);
    for cmd in ["generate", "train", "eval", "oracle", "metrics", "plot"] {
        let out = unotb(dir.path(), &[cmd, "--config", "toy.toml", "--out", "run"]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let run = dir.path().join("run");
    for f in [
        "manifest_train.json",
        "checkpoint.bin",
        "report.json",
        "timing.json",
        "eval/k1_inputs.csv",
        "eval/k2_barycenter.csv",
        "eval/acceptance.json",
        "oracle/t_star.csv",
        "oracle/q_star.csv",
        "oracle/summary.json",
        "plot/scatter.svg",
        "plot/series.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["L2"]["value"].as_f64().unwrap() >= 0.0);
    assert!(metrics["W2"]["value"].as_f64().unwrap() >= 0.0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest_train.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"].as_str().unwrap(), TOY);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["losses"].as_array().unwrap().len(), 20);
    assert!(report.get("wall_time_sec").is_none());
}

#[test]
fn plot_does_not_touch_numeric_outputs() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "toy.toml", &format!("{TOY}\nplot.enabled = false\n"));
    for cmd in ["generate", "train", "eval"] {
        assert!(unotb(dir.path(), &[cmd, "--config", "toy.toml", "--out", "run"]).status.success());
    }
    let run = dir.path().join("run");
    assert!(!run.join("plot").exists());
    let before = std::fs::read(run.join("eval/k1_barycenter.csv")).unwrap();
    assert!(unotb(dir.path(), &["plot", "--config", "toy.toml", "--out", "run"]).status.success());
    assert_eq!(before, std::fs::read(run.join("eval/k1_barycenter.csv")).unwrap());
    assert!(run.join("plot/scatter.svg").exists());
}
