//! End-to-end checks of the `dfl` binary and its CSV output.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfl_sim::aggregation::Rule;
use dfl_sim::attacks::AttackKind;
use dfl_sim::cli::{parse_csv, CSV_HEADER, EXIT_CONFIG, EXIT_OK, ROUNDS_HEADER};
use dfl_sim::config::{parse_config_str, DatasetSpec, ExperimentConfig};
use proptest::prelude::*;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join(name)
}

fn dfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfl"))
        .args(args)
        .env("DFL_WORKERS", "2")
        .output()
        .unwrap()
}

fn grid(dir: &Path, out: &Path) -> Output {
    dfl(&["grid", dir.to_str().unwrap(), "--seeds", "2", "--out", out.to_str().unwrap()])
}

fn tiny_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(fixture("fixtures/tiny.toml"), dir.path().join("tiny.toml")).unwrap();
    dir
}

#[test]
fn validate_accepts_repo_configs() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["default.toml", "classification.toml", "robustness"] {
        let out = dfl(&["validate", root.join(name).to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(EXIT_OK), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn bad_config_exits_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "rounds = 10\n[aggregator]\nrule = \"balance\"\ngamma = -1.0\n").unwrap();
    let out = dfl(&["validate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("aggregator.gamma"));

    std::fs::write(&path, "roundz = 10\n").unwrap();
    let out = dfl(&["validate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("roundz"));
}

#[test]
fn grid_csv_matches_golden_and_is_reproducible() {
    let dir = tiny_dir();
    let out_a = dir.path().join("a.csv");
    let out_b = dir.path().join("b.csv");
    let config_dir = dir.path().join("configs");
    std::fs::create_dir(&config_dir).unwrap();
    std::fs::rename(dir.path().join("tiny.toml"), config_dir.join("tiny.toml")).unwrap();

    assert_eq!(grid(&config_dir, &out_a).status.code(), Some(EXIT_OK));
    assert_eq!(grid(&config_dir, &out_b).status.code(), Some(EXIT_OK));
    let a = std::fs::read_to_string(&out_a).unwrap();
    assert_eq!(a, std::fs::read_to_string(&out_b).unwrap());

    let golden = std::fs::read_to_string(fixture("golden/tiny_grid.csv")).unwrap();
    assert_eq!(a, golden, "grid output drifted from tests/golden/tiny_grid.csv");

    // schema: fixed header, 4 configs x (2 seeds + aggregate)
    assert_eq!(a.lines().next(), Some(CSV_HEADER));
    let rows = parse_csv(&a).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r["status"] == "ok" && r["config_hash"].len() == 12));
    let mean_rows = rows.iter().filter(|r| r["seed"] == "mean").count();
    assert_eq!(mean_rows, 4);
}

#[test]
fn table_renders_grid_output() {
    let dir = tempfile::tempdir().unwrap();
    let spec = fixture("fixtures/tiny.spec.toml");
    let out = dfl(&["table", fixture("golden/tiny_grid.csv").to_str().unwrap(), "--spec", spec.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let text = String::from_utf8(out.stdout).unwrap();
    // FedAvg collapses under the Gaussian attack, BALANCE does not
    let fedavg = text.lines().find(|l| l.contains("FedAvg")).unwrap();
    let balance = text.lines().find(|l| l.contains("BALANCE")).unwrap();
    assert!(fedavg.contains(">100"), "{text}");
    assert!(!balance.contains(">100"), "{text}");
    drop(dir);
}

#[test]
fn run_writes_round_trace() {
    let dir = tiny_dir();
    let trace = dir.path().join("rounds.csv");
    let result = dir.path().join("result.csv");
    let out = dfl(&[
        "run",
        dir.path().join("tiny.toml").to_str().unwrap(),
        "--out",
        result.to_str().unwrap(),
        "--rounds-csv",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&result).unwrap();
    assert_eq!(parse_csv(&text).unwrap().len(), 4);
    let trace = std::fs::read_to_string(&trace).unwrap();
    assert!(trace.starts_with(ROUNDS_HEADER));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips_through_toml(
        seed in any::<u64>(),
        rounds in 1usize..1000,
        rule in 0..Rule::ALL.len(),
        attack in 0..AttackKind::ALL.len(),
        lr in 1e-6f64..1.0,
    ) {
        let mut c = ExperimentConfig::desk(Rule::ALL[rule], AttackKind::ALL[attack], seed);
        c.rounds = rounds;
        c.learning_rate = lr;
        if c.attack.kind == AttackKind::Backdoor {
            c.dataset = DatasetSpec::SyntheticClassification(Default::default());
        }
        let back = parse_config_str(&c.to_toml()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
    }
}
