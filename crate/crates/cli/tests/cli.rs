use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "seed": 5,
  "input": {"synthetic": {"preset": "planted_heterogeneous", "n_rows": 3000}},
  "out": "out",
  "vae": {"grid": [{"name": "small", "arch": {"hidden_units": 16, "epochs": 8}}], "draws": 4},
  "cluster": {"n_min": 50},
  "experiment": {"folds": 2, "min_class_rows": 10}
}"#;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentrisk"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.json"), config).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_run_writes_every_artifact_and_reruns_identically() {
    let dir = setup(SMALL);
    let a = cli(dir.path(), &["run", "--config", "config.json", "--out", "a"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = cli(dir.path(), &["run", "--config", "config.json", "--out", "b"]);
    assert!(b.status.success(), "{}", stderr(&b));
    let names = [
        "ingest.json", "partition.json", "woe.json", "vae.json", "vae_grid.tsv", "vae_trace.tsv", "clusters.json",
        "clusters.tsv", "salient.json", "salient.txt", "performance.tsv", "performance.json", "report.json",
    ];
    for name in names {
        let fa = fs::read(dir.path().join("a").join(name)).unwrap_or_else(|_| panic!("{name} missing"));
        let fb = fs::read(dir.path().join("b").join(name)).unwrap();
        assert!(fa == fb, "{name} differs between reruns");
    }
    assert!(!dir.path().join("a/error.log").exists());

    // Resuming a finished run redoes nothing and leaves the artifacts alone.
    let before = fs::read(dir.path().join("a/performance.json")).unwrap();
    let again = cli(dir.path(), &["run", "--config", "config.json", "--out", "a", "--resume"]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(fs::read(dir.path().join("a/performance.json")).unwrap(), before);
}

#[test]
fn stage_subcommands_chain_through_artifacts() {
    let dir = setup(SMALL);
    let run = |cmd: &str| {
        let o = cli(dir.path(), &[cmd, "--config", "config.json"]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    };
    run("woe-fit");
    let o = cli(dir.path(), &["score", "--config", "config.json"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("clusters.json"), "{}", stderr(&o));
    assert!(fs::read_to_string(dir.path().join("out/error.log")).unwrap().contains("clusters.json"));

    run("vae-train");
    run("cluster");
    let out = dir.path().join("out");
    assert!(out.join("clusters.json").is_file());
    let scatter = fs::read_to_string(out.join("clusters.tsv")).unwrap();
    assert!(scatter.starts_with("z1\tz2\tcluster\ty"), "{}", &scatter[..40.min(scatter.len())]);
    run("salient");
    run("score");
    assert!(out.join("performance.tsv").is_file());
    assert!(!out.join("error.log").exists());
}

#[test]
fn compare_transforms_reports_five_codings() {
    let dir = setup(SMALL);
    let o = cli(dir.path(), &["compare-transforms", "--config", "config.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = fs::read_to_string(dir.path().join("out/compare/comparison.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 5, "{tsv}");
    for t in ["coarse_woe", "fine_woe", "pca", "standardized", "raw"] {
        assert!(dir.path().join(format!("out/compare/scatter_{t}.tsv")).is_file());
    }
}

#[test]
fn baselines_need_the_woe_artifacts() {
    let dir = setup(SMALL);
    let o = cli(dir.path(), &["baselines", "--config", "config.json", "--k-max", "4", "--restarts", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("partition.json"), "{}", stderr(&o));
    assert!(cli(dir.path(), &["woe-fit", "--config", "config.json"]).status.success());
    let o = cli(dir.path(), &["baselines", "--config", "config.json", "--k-max", "4", "--restarts", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let idx = fs::read_to_string(dir.path().join("out/baselines/indexes.tsv")).unwrap();
    assert_eq!(idx.lines().count(), 4);
}

#[test]
fn missing_label_fails_before_any_work() {
    let dir = setup(
        r#"{"seed": 1, "input": {"csv": {"path": "d.csv",
            "schema": {"inline": {"features": [{"name": "a", "kind": "continuous"}]}}}}}"#,
    );
    fs::write(dir.path().join("d.csv"), "y,a\n0,1\n1,2\n").unwrap();
    let o = cli(dir.path(), &["run", "--config", "config.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("label"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn seed_is_required_and_can_come_from_the_flag() {
    let dir = setup(r#"{"input": {"synthetic": {"preset": "homogeneous", "n_rows": 500}}}"#);
    let o = cli(dir.path(), &["woe-fit", "--config", "config.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("seed"));
    let o = cli(dir.path(), &["woe-fit", "--config", "config.json", "--seed", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unknown_stage_is_a_validation_error() {
    let dir = setup(SMALL);
    let o = cli(dir.path(), &["run", "--config", "config.json", "--stage", "train"]);
    assert_eq!(o.status.code(), Some(2));
}
