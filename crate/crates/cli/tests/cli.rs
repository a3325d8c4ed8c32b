use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = include_str!("../../../configs/tiny.toml");

fn downscale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_downscale")).args(args).output().expect("run downscale")
}

fn stage(name: &str, config: &Path, extra: &[&str]) -> Output {
    let mut args = vec![name, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    downscale(&args)
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = downscale(&["make-synthetic", "--config", "/nonexistent/exp.toml"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_keys_and_bad_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "name = \"x\"\nbogus = 1\n");
    assert_eq!(stage("make-synthetic", &p, &[]).status.code(), Some(2));
    let p = write_config(dir.path(), "[grid]\ncoarse_res = 0.25\nfine_res = 0.1\n");
    assert_eq!(stage("make-synthetic", &p, &[]).status.code(), Some(2));
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(downscale(&["fly", "--config", "x.toml"]).status.code(), Some(2));
}

#[test]
fn stages_out_of_order_name_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), TINY);
    let o = stage("train-regression", &p, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("make-synthetic"), "{}", stderr(&o));
    let o = stage("make-synthetic", &p, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = stage("train-diffusion", &p, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("regression checkpoint required"), "{}", stderr(&o));
}

#[test]
fn full_pipeline_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), TINY);
    let out = dir.path().join("elsewhere");
    let extra = ["--seed", "5", "--members", "2", "--out", out.to_str().unwrap()];
    for name in ["make-synthetic", "train-regression", "train-diffusion", "predict", "evaluate", "forecast-emulate"] {
        let o = stage(name, &p, &extra);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
    assert!(out.join("evaluation/metrics.csv").is_file());
    assert!(out.join("forecast/curves.csv").is_file());
    let metrics = std::fs::read_to_string(out.join("evaluation/metrics.csv")).unwrap();
    assert!(metrics.contains("crps") && metrics.contains("MAE75-100"));
    // Changing a predict setting invalidates the stored predictions.
    let o = stage("evaluate", &p, &["--seed", "5", "--members", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
