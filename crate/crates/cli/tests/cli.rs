use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dcha(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcha"))
        .args(args)
        .env("DCHA_THREADS", "1")
        .output()
        .expect("binary runs")
}

const SMALL: &str = "\
phantom.grid_n = 32
phantom.image_size = 32
phantom.radius = 15
phantom.lesion_radius_min = 2
phantom.lesion_radius_max = 3
phantom.n_cases = 12
phantom.seed = 3
preprocess.target_size = 32
train.epochs = 2
train.lr0 = 1e-3
eval.split = all
";

fn write_config(dir: &Path) -> String {
    let text = format!(
        "{SMALL}paths.data_dir = {d}/data\npaths.checkpoint_dir = {d}/ckpt\npaths.report_dir = {d}/report\npaths.saliency_dir = {d}/sal\n",
        d = dir.display()
    );
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn pipeline(dir: &Path) {
    let cfg = write_config(dir);
    for cmd in ["generate", "train", "eval", "saliency"] {
        let out = dcha(&[cmd, "--config", &cfg]);
        assert!(
            out.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn pipeline_runs_and_reproduces() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in ["data/manifest.csv", "ckpt/last.ckpt", "ckpt/loss_trace.csv", "report/predictions.csv", "report/summary.txt", "sal/hits.csv"] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between runs");
    }
    let summary = fs::read_to_string(a.path().join("report/summary.txt")).unwrap();
    assert!(summary.starts_with("accuracy="));
    assert!(a.path().join("ckpt/effective_config.txt").exists());
}

#[test]
fn unknown_command_is_a_usage_error() {
    let out = dcha(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(dcha(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.cfg");
    fs::write(&p, "train.epochs = 1\nbogus.key = 1\n").unwrap();
    let out = dcha(&["generate", "--config", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
}

#[test]
fn eval_without_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("missing.ckpt");
    let set = format!("paths.checkpoint={}", ckpt.display());
    let out = dcha(&["eval", "--set", &set]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&ckpt.display().to_string()));
}
