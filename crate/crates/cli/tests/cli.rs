use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn agg_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agg-lab")).args(args).output().unwrap()
}

fn small_run(out: &Path, extra: &[&str]) -> Output {
    let cfg = config("smoke.toml");
    let mut args = vec![
        "run",
        cfg.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--set",
        "run.seeds=[0, 1, 2]",
    ];
    args.extend_from_slice(extra);
    agg_lab(&args)
}

#[test]
fn run_then_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("smoke");
    let r = small_run(&out, &["--set", "run.variants=[\"agg\", \"dds_only\"]"]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let table = String::from_utf8(r.stdout).unwrap();
    assert!(table.contains("agg") && table.contains("dds_only"));
    let d = out.to_str().unwrap();
    let c = agg_lab(&[
        "compare",
        d,
        d,
        "--variant-a",
        "agg",
        "--variant-b",
        "dds_only",
        "--json",
    ]);
    assert_eq!(c.status.code(), Some(0), "{}", String::from_utf8_lossy(&c.stderr));
    let v: serde_json::Value = serde_json::from_slice(&c.stdout).unwrap();
    assert_eq!(v["seeds"], 3);
    assert_eq!(v["columns"].as_array().unwrap().len(), 5);
    // Ambiguous variant selection is a usage error.
    assert_eq!(agg_lab(&["compare", d, d]).status.code(), Some(1));
}

#[test]
fn invalid_config_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let r = small_run(&tmp.path().join("x"), &["--set", "edit.t_edit=500"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("error:"));
    assert_eq!(agg_lab(&["run", "/nonexistent/config.toml"]).status.code(), Some(1));
}

#[test]
fn cell_failures_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bad");
    let r = small_run(
        &out,
        &[
            "--set",
            "run.variants=[\"none\", \"agg\"]",
            "--set",
            "guidance.lambda_sty=1e308",
            "--set",
            "guidance.lambda_reg=1e308",
        ],
    );
    assert_eq!(r.status.code(), Some(2));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.matches(",error: ").count(), 3);
}

#[test]
fn invert_dumps_the_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("inv");
    let cfg = config("image-default.toml");
    let r = agg_lab(&[
        "invert",
        cfg.to_str().unwrap(),
        "--dump-cache",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    let csv = std::fs::read_to_string(out.join("cache.csv")).unwrap();
    // 10 trajectories with a 20-step window.
    assert_eq!(csv.lines().count(), 1 + 10 * 20);
    assert_eq!(agg_lab(&["invert", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn train_eps_writes_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("net");
    let cfg = config("smoke.toml");
    let r = agg_lab(&[
        "train-eps",
        cfg.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--set",
        "model.epsnet.train_steps=20",
    ]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("epsnet.txt").exists());
    let losses = std::fs::read_to_string(out.join("train_loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 21);
}
