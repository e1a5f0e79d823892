use std::path::{Path, PathBuf};
use std::process::Command;

use sal_core::config::Config;
use sal_core::dataio::{load_csv, read_env_csv, split_environments, write_env_csv, EnvSplit, TableSchema};
use sal_core::datagen::toy_data;
use sal_core::experiment::{load_data, run_experiment, ExperimentConfig};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

// small enough that every command finishes in a second or two
const FAST: &[&str] = &[
    "--set", "toy.test_n=60",
    "--set", "sal.outer_iters=3",
    "--set", "sal.theta_iters=3",
    "--set", "sal.ascent_steps=10",
    "--set", "wdrl.lambda=1",
    "--set", "lasso.lambda=0.01",
    "--set", "ridge.lambda=0.01",
    "--set", "irm.lambda=1",
];

fn sal(args: &[&str], out: &Path) -> String {
    let res = Command::new(env!("CARGO_BIN_EXE_sal"))
        .current_dir(root())
        .args(args)
        .args(["--out", out.to_str().unwrap()])
        .args(FAST)
        .output()
        .expect("run sal");
    let stdout = String::from_utf8_lossy(&res.stdout).into_owned();
    assert!(
        res.status.success(),
        "sal {args:?} failed:\n{stdout}\n{}",
        String::from_utf8_lossy(&res.stderr)
    );
    stdout
}

#[test]
fn bundled_table_loads_and_splits_without_losing_rows() {
    let schema = TableSchema::load(&data_dir().join("houses.schema")).unwrap();
    let table = load_csv(&data_dir().join("houses.csv"), &schema).unwrap();
    assert_eq!(table.len(), 200);
    // three numeric features plus a one-hot block for three neighborhoods
    assert_eq!(table.x.ncols(), 6);
    let bins = EnvSplit::Bins(vec![1950.0, 1965.0, 1980.0, 1995.0, 2010.0]);
    let out = split_environments(&table, "year_built", &bins).unwrap();
    assert_eq!(out.envs.len(), 4);
    let kept: usize = out.envs.iter().map(|e| e.len()).sum();
    assert_eq!(kept + out.leftover, table.len());
}

#[test]
fn bundled_config_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::load(&data_dir().join("houses.cfg")).unwrap();
    cfg.set("csv.path", data_dir().join("houses.csv").display());
    cfg.set("csv.schema", data_dir().join("houses.schema").display());
    cfg.set("out", dir.path().display());
    cfg.set("sal.outer_iters", 3);
    let exp = ExperimentConfig::from_config(&cfg).unwrap();
    let data = load_data(&exp.data, 0).unwrap();
    assert_eq!(data.train.len(), 2);
    assert_eq!(data.test.len(), 2);
    let report = run_experiment(&exp).unwrap();
    assert_eq!(report.summaries.len(), exp.methods.len());
    assert_eq!(report.files.len(), 3);
    for f in &report.files {
        assert!(f.exists());
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + exp.methods.len());
}

#[test]
fn env_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(20, 3).unwrap();
    let p = dir.path().join("toy.csv");
    write_env_csv(&p, &data.test).unwrap();
    let back = read_env_csv(&p).unwrap();
    assert_eq!(back.len(), data.test.len());
    for (a, b) in back.iter().zip(&data.test) {
        assert_eq!(a.env_id, b.env_id);
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
    }
}

#[test]
fn cli_generate_train_evaluate_certify() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    sal(&["generate", "--seed", "3"], out);
    assert!(out.join("train.csv").exists() && out.join("test.csv").exists());

    let stdout = sal(&["train", "--method", "SAL", "--seed", "3"], out);
    assert!(stdout.contains("weights ="));
    let model = out.join("model.txt");
    // training twice with the same seed writes the same model
    let first = std::fs::read_to_string(&model).unwrap();
    sal(&["train", "--method", "SAL", "--seed", "3"], out);
    assert_eq!(first, std::fs::read_to_string(&model).unwrap());

    let test = out.join("test.csv");
    let stdout = sal(
        &["evaluate", "--model", model.to_str().unwrap(), "--data", test.to_str().unwrap()],
        out,
    );
    assert!(stdout.contains("mean_error"));
    let eval = std::fs::read_to_string(out.join("evaluation.csv")).unwrap();
    assert_eq!(eval.lines().count(), 1 + 9);

    let stdout = sal(
        &["certify", "--model", model.to_str().unwrap(), "--data", test.to_str().unwrap()],
        out,
    );
    assert!(stdout.starts_with("radius ="));
    assert!(out.join("certificate.txt").exists());
}

#[test]
fn cli_benchmark_sweep_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let stdout = sal(&["benchmark"], out);
    // header plus one line per method
    assert_eq!(stdout.lines().filter(|l| l.contains(',')).count(), 7);
    assert!(out.join("per_env.csv").exists());

    let sweep = out.join("sweep");
    sal(&["sweep", "--lambdas", "1,0.5"], &sweep);
    let stdout = sal(&["plot-data", "--kind", "error"], &sweep);
    assert!(stdout.starts_with("wrote"));
}

#[test]
fn cli_grad_check_writes_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = sal(&["grad-check", "--iters", "1", "--directions", "20"], dir.path());
    assert!(stdout.contains("fraction of random directions beaten"));
    let csv = std::fs::read_to_string(dir.path().join("grad_check.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 20);
}

#[test]
fn cli_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["train", "--method", "ERM,SAL"],
        vec!["train", "--method", "nope"],
        vec!["benchmark", "--set", "no.such.key=1"],
        vec!["benchmark", "--runs", "0"],
    ] {
        let res = Command::new(env!("CARGO_BIN_EXE_sal"))
            .current_dir(root())
            .args(&args)
            .args(["--out", dir.path().to_str().unwrap()])
            .output()
            .unwrap();
        assert!(!res.status.success(), "{args:?} should fail");
        assert!(String::from_utf8_lossy(&res.stderr).starts_with("error:"));
    }
}
