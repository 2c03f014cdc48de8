//! End-to-end tests of the `mixlab` binary: output contracts, exit codes,
//! and run-to-run determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mixlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const CONFIG: &str = r#"
seeds = [1, 2]

[dataset]
kind = "synthetic"
feature_dim = 2
train_sizes = [60, 12]
theta_shared = [1.0, -0.5]
domain_deltas = [[0.0, 0.0], [0.2, 0.0]]
noise_sigma = 0.2
valid_fraction = 0.25
valid_min = 16

[model]
kind = "shared_linear"
dim = 2

[optimizer]
kind = "sgd"
lr = 0.05

[train]
batch_size = 8
total_steps = 120
eval_interval = 30

[thresholds]
kind = "noise_floor"
margin = 0.1

[gradvar]
tau_grid = [1.0, 2.0]
n_samples = 2000
batch_size = 1

[[arm]]
name = "ts2"
mode = "temperature_sampling"
plan = "static"
tau = 2.0

[[arm]]
name = "s2"
mode = "scalarization"
plan = "static"
tau = 2.0
"#;

#[test]
fn probs_reports_hand_checked_values() {
    let out = mixlab(&["probs", "--sizes", "900,100", "--tau", "2"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("0.750000"), "{text}");
    assert!(text.contains("0.250000"), "{text}");
    assert!(text.contains("0.833333"), "{text}");
    assert!(text.contains("2.500000"), "{text}");
    assert!(text.contains("F(tau=2) = 1.250000"), "{text}");
}

#[test]
fn probs_tau_one_gives_unit_weights() {
    let out = mixlab(&["probs", "--sizes", "900,100", "--tau", "1"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("F(tau=1) = 1.000000"), "{text}");
    // w column is all ones, plus the F line itself.
    assert_eq!(text.matches("1.000000").count(), 3, "{text}");
}

#[test]
fn probs_rejects_zero_tau() {
    let out = mixlab(&["probs", "--sizes", "900,100", "--tau", "0"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(err.contains("temperature"), "{err}");
}

#[test]
fn probs_rejects_malformed_sizes() {
    let out = mixlab(&["probs", "--sizes", "900,banana", "--tau", "2"]);
    assert!(!out.status.success());
}

#[test]
fn probs_reads_catalog_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("catalog.tsv");
    fs::write(&path, "1\tenglish\t900\n2\tswahili\t100\n").unwrap();
    let out = mixlab(&["probs", "--catalog", path.to_str().unwrap(), "--tau", "2"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("swahili"));
}

#[test]
fn fsweep_writes_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("f.csv");
    let out = mixlab(&[
        "fsweep",
        "--alphas",
        "0,1",
        "--domains",
        "10",
        "--unit",
        "1000",
        "--taus",
        "1:3:1",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = fs::read_to_string(&out_path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), "alpha,tau,f");
    // |alphas| * |taus| data rows.
    assert_eq!(text.lines().count(), 2 + 2 * 3);
    for line in text.lines().skip(2) {
        let fields: Vec<&str> = line.split(',').collect();
        let (alpha, f): (f64, f64) = (fields[0].parse().unwrap(), fields[2].parse().unwrap());
        if alpha == 0.0 {
            assert!((f - 1.0).abs() < 1e-12, "alpha=0 rows must be F=1: {line}");
        }
        assert!(f >= 1.0 - 1e-12);
    }
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, CONFIG).unwrap();
    path
}

#[test]
fn run_executes_all_arms_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out1 = dir.path().join("r1");
    let out2 = dir.path().join("r2");
    let a = mixlab(&["run", "--config", cfg.to_str().unwrap(), "--out", out1.to_str().unwrap()]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = mixlab(&["run", "--config", cfg.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    assert!(b.status.success());
    for name in ["ts2_seed1.csv", "ts2_seed2.csv", "s2_seed1.csv", "s2_seed2.csv"] {
        let x = fs::read(out1.join(name)).unwrap();
        let y = fs::read(out2.join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name} not byte-identical across reruns");
    }
    assert!(stdout(&a).contains("median_steps"));
}

#[test]
fn run_refuses_existing_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("exists");
    fs::create_dir(&out_dir).unwrap();
    let out = mixlab(&["run", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("already exists"));
}

#[test]
fn run_names_offending_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, CONFIG.replace("batch_size", "batch_sizes")).unwrap();
    let out = mixlab(&["run", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));
}

#[test]
fn run_missing_config_path_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mixlab(&[
        "run",
        "--config",
        dir.path().join("nope.toml").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing data"));
}

#[test]
fn gradvar_writes_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let f1 = dir.path().join("g1.csv");
    let f2 = dir.path().join("g2.csv");
    let a = mixlab(&["gradvar", "--config", cfg.to_str().unwrap(), "--out", f1.to_str().unwrap()]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = mixlab(&["gradvar", "--config", cfg.to_str().unwrap(), "--out", f2.to_str().unwrap()]);
    assert!(b.status.success());
    let x = fs::read_to_string(&f1).unwrap();
    assert_eq!(x, fs::read_to_string(&f2).unwrap());
    assert!(x.lines().nth(1).unwrap().starts_with("tau,var_s,var_ts,gap"));
    // tau = 1 row: the two samplers coincide, so the gap is ~0.
    let row: Vec<f64> = x
        .lines()
        .nth(2)
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row[0], 1.0);
    assert!(row[3].abs() < 1e-3, "tau=1 gap should be tiny: {row:?}");
}
