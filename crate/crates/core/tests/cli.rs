//! Subcommand behavior and exit codes, driven in-process.

use std::fs;
use std::path::Path;

use clap::Parser;
use muxncs::cli::{self, Cli, EXIT_INFEASIBLE, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE};
use muxncs::rl;
use tempfile::TempDir;

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("muxncs").chain(args.iter().copied()))
}

fn out_dir() -> (TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().to_str().unwrap().to_string();
    (dir, path)
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn analyze_reference_plant_certifies() {
    let (dir, out) = out_dir();
    assert_eq!(run(&["analyze", "--delta", "0.8", "--out", &out]), EXIT_OK);
    let report = json(&dir.path().join("certificate.json"));
    let eps = report["epsilon_bar"].as_f64().unwrap();
    assert!(eps > 0.0 && eps <= 0.45, "{eps}");
    assert_eq!(report["delta"].as_f64(), Some(0.8));
    assert!(report["margins"].as_array().unwrap().iter().all(|m| m.as_f64().unwrap() < -1e-9));
    assert!(dir.path().join("analyze.meta.json").exists());
}

#[test]
fn analyze_explosive_plant_is_infeasible() {
    let (dir, out) = out_dir();
    // A = 3I with a deadbeat gain: every mode matrix carries A on its diagonal.
    let plant = dir.path().join("plant.json");
    fs::write(
        &plant,
        r#"{"A":[[3,0],[0,3]],"B":[[1,0],[0,1]],"C":[[1,0],[0,1]],"K":[[-3,0],[0,-3]]}"#,
    )
    .unwrap();
    let code = run(&["analyze", "--plant", plant.to_str().unwrap(), "--out", &out]);
    assert_eq!(code, EXIT_INFEASIBLE);
    let report = json(&dir.path().join("certificate.json"));
    assert_eq!(report["status"], "no_feasible_epsilon");
}

#[test]
fn analyze_missing_plant_names_the_path() {
    let (dir, out) = out_dir();
    let missing = dir.path().join("nowhere").join("plant.json");
    let missing = missing.to_str().unwrap();
    let cli = Cli::parse_from(["muxncs", "analyze", "--plant", missing, "--out", &out]);
    let err = cli::dispatch(&cli).unwrap_err();
    assert_eq!(err.code, EXIT_NUMERICAL);
    assert!(err.message.contains(missing), "{}", err.message);
    assert_eq!(run(&["analyze", "--plant", missing, "--out", &out]), EXIT_NUMERICAL);
}

#[test]
fn sweep_rejects_zero_delta() {
    let (_dir, out) = out_dir();
    assert_eq!(run(&["sweep", "--deltas", "0,0.5", "--out", &out]), EXIT_USAGE);
}

#[test]
fn sweep_default_grid_and_singleton() {
    let (dir, out) = out_dir();
    assert_eq!(run(&["sweep", "--out", &out]), EXIT_OK);
    let rows = csv_rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 10);
    // Rows with no feasible ε count as +∞.
    let eps: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap_or(f64::INFINITY)).collect();
    assert!(eps.windows(2).all(|w| w[1] <= w[0]), "{eps:?}");

    let (single, single_out) = out_dir();
    assert_eq!(run(&["sweep", "--deltas", "0.8", "--out", &single_out]), EXIT_OK);
    assert_eq!(run(&["analyze", "--delta", "0.8", "--out", &single_out]), EXIT_OK);
    let row = &csv_rows(&single.path().join("sweep.csv"))[0];
    let report = json(&single.path().join("certificate.json"));
    assert_eq!(row[1].parse::<f64>().unwrap(), report["epsilon_bar"].as_f64().unwrap());
    assert_eq!(row[1].parse::<f64>().unwrap(), eps[7]);
}

#[test]
fn simulate_unknown_policy_is_usage_error() {
    let (_dir, out) = out_dir();
    let cli = Cli::parse_from(["muxncs", "simulate", "--policy", "greedy-ish", "--out", &out]);
    let err = cli::dispatch(&cli).unwrap_err();
    assert_eq!(err.code, EXIT_USAGE);
    for name in ["egreedy", "round-robin", "random", "always:0", "dqn:"] {
        assert!(err.message.contains(name), "{}", err.message);
    }
}

#[test]
fn simulate_silent_from_origin_is_all_zero() {
    let (dir, out) = out_dir();
    let code = run(&["simulate", "--policy", "always:0", "--x0", "0,0", "--runs", "100", "--horizon", "50", "--out", &out]);
    assert_eq!(code, EXIT_OK);
    let rows = csv_rows(&dir.path().join("trace.csv"));
    assert_eq!(rows.len(), 50);
    for row in &rows {
        // k, x1, x2, xhat1, xhat2, uhat1, sigma, gamma, mode, cost, reward
        for i in [1, 2, 3, 4, 5, 9, 10] {
            assert_eq!(row[i].parse::<f64>().unwrap(), 0.0, "{row:?}");
        }
        assert_eq!(&row[6], "0");
    }
    assert!(dir.path().join("decay.csv").exists());
}

#[test]
fn train_requires_certificate_or_override() {
    let (_dir, out) = out_dir();
    let cli = Cli::parse_from(["muxncs", "train", "--episodes", "1", "--out", &out]);
    let err = cli::dispatch(&cli).unwrap_err();
    assert_eq!(err.code, EXIT_USAGE);
    assert!(err.message.contains("--uncertified"), "{}", err.message);
    assert_eq!(run(&["train", "--epsilon", "0.2", "--episodes", "1", "--out", &out]), EXIT_USAGE);
}

#[test]
fn train_from_certificate_file() {
    let (dir, out) = out_dir();
    assert_eq!(run(&["analyze", "--delta", "0.8", "--out", &out]), EXIT_OK);
    let cert = dir.path().join("certificate.json");
    let code = run(&[
        "train", "--certificate", cert.to_str().unwrap(), "--episodes", "2", "--hidden", "8,4", "--horizon", "40",
        "--out", &out,
    ]);
    assert_eq!(code, EXIT_OK);
    let (_, meta) = rl::load_weights(fs::File::open(dir.path().join("weights.json")).unwrap()).unwrap();
    let report = json(&cert);
    assert_eq!(meta.epsilon, report["epsilon_bar"].as_f64().unwrap());

    // A certificate for another δ is refused.
    let code = run(&["train", "--certificate", cert.to_str().unwrap(), "--delta", "0.5", "--episodes", "1", "--out", &out]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn train_zero_episodes_writes_loadable_weights() {
    let (dir, out) = out_dir();
    let code = run(&["train", "--epsilon", "0.2", "--uncertified", "--episodes", "0", "--out", &out]);
    assert_eq!(code, EXIT_OK);
    let curve = fs::read_to_string(dir.path().join("reward_curve.csv")).unwrap();
    assert_eq!(curve.trim(), "episode,total_reward,moving_avg_100");
    let weights = dir.path().join("weights.json");
    let doc = json(&weights);
    assert_eq!(doc["arch"], serde_json::json!([5, 1024, 256, 3]));

    let policy = format!("dqn:{}", weights.display());
    let code = run(&["simulate", "--policy", &policy, "--runs", "100", "--horizon", "20", "--out", &out]);
    assert_eq!(code, EXIT_OK);
}

#[test]
fn compare_needs_two_policies() {
    let (_dir, out) = out_dir();
    assert_eq!(run(&["compare", "--policy", "random", "--out", &out]), EXIT_USAGE);
}

#[test]
fn compare_writes_paired_table() {
    let (dir, out) = out_dir();
    let code = run(&[
        "compare", "--policy", "round-robin", "round-robin:1,0,-1", "random", "always:-1", "--episodes", "50", "--horizon", "50", "--out", &out,
    ]);
    assert_eq!(code, EXIT_OK);
    let rows = csv_rows(&dir.path().join("compare.csv"));
    let names: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(names, ["round-robin", "round-robin:1,0,-1", "random", "always:-1"]);
    assert!(rows.iter().all(|r| &r[3] == "50"));
}

#[test]
fn bad_arguments_exit_with_usage() {
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&["analyze", "--delta", "not-a-number"]), EXIT_USAGE);
    assert_eq!(run(&["--help"]), EXIT_OK);
}
