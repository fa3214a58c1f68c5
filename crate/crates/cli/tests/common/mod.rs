//! Helpers shared by the CLI integration tests and the acceptance runner.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use calign_core::data::Role;
use calign_core::sim::{gen_feature_dataset, FeatureModel};
use sha2::{Digest, Sha256};

pub fn calign(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calign"))
        .args(args)
        .current_dir(dir)
        .env_remove("CALIGN_OUT_DIR")
        .output()
        .expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = calign(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub const GAUSSIAN_SCENARIO: &str = r#"{
  "model": {"type": "scores", "pi": 0.6, "mu0": 0.0, "sigma0": 1.0, "mu1": 1.5, "sigma1": 1.0},
  "n_cal": 200, "m": 200, "runs": 200, "seed": 7, "predictor": "identity", "baseline": true,
  "pool_size": 20000
}"#;

/// Reference and test records whose single feature is the label plus small noise.
pub fn oracle_fixture(dir: &Path) {
    let model = FeatureModel {
        w: vec![4.0],
        noise_sd: 0.05,
        intercept: 0.0,
    };
    gen_feature_dataset(&model, 400, 1)
        .unwrap()
        .save(dir.join("ref.csv"))
        .unwrap();
    gen_feature_dataset(&model, 100, 2)
        .unwrap()
        .with_role(Role::Test)
        .unwrap()
        .save(dir.join("test.csv"))
        .unwrap();
}

pub const GENERATIONS: &str = r#"{"unit_id": "u1", "generations": ["The Eiffel Tower", "the eiffel tower."], "reference": "Eiffel Tower"}
{"unit_id": "u2", "generations": ["Big Ben", "Louvre"], "reference": "Eiffel Tower"}
"#;

pub fn digest(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

/// Runs every subcommand in a fresh directory and returns the artifact paths.
pub fn run_all(dir: &Path) -> Vec<PathBuf> {
    oracle_fixture(dir);
    fs::write(dir.join("g.jsonl"), GENERATIONS).unwrap();
    fs::write(
        dir.join("s.json"),
        GAUSSIAN_SCENARIO.replace("\"runs\": 200", "\"runs\": 20"),
    )
    .unwrap();
    let cmds: Vec<Vec<&str>> = vec![
        vec!["featurize", "--input", "g.jsonl"],
        vec![
            "train",
            "--input",
            "ref.csv",
            "--calibration-out",
            "cal.csv",
            "--predictor",
            "stumps",
        ],
        vec!["select", "--reference", "ref.csv", "--test", "test.csv"],
        vec!["simulate", "--scenario", "s.json"],
        vec![
            "curves",
            "--reference",
            "ref.csv",
            "--runs",
            "5",
            "--alphas",
            "0.1,0.3",
            "--output",
            "fixed.csv",
        ],
        vec!["bounds", "--scenario", "s.json"],
        vec![
            "single-features",
            "--reference",
            "ref.csv",
            "--runs",
            "4",
            "--alphas",
            "0.2",
        ],
    ];
    for c in &cmds {
        ok(dir, c);
    }
    [
        "records.csv",
        "predictor.json",
        "cal.csv",
        "selection.csv",
        "report.json",
        "curves.csv",
        "curves_baseline.csv",
        "fixed.csv",
        "bounds.json",
        "single_features.csv",
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect()
}
