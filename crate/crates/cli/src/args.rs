use std::path::PathBuf;

use calign_core::predictor::PredictorKind;
use clap::{Args, Parser, Subcommand};

/// Conformal alignment: certify generated outputs as aligned with FDR control.
#[derive(Debug, Parser)]
#[command(name = "calign", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Target FDR level in (0, 1).
    #[arg(long, global = true, default_value_t = 0.1, value_parser = open_unit)]
    pub alpha: f64,
    /// Alignment cutoff: units with A > c count as aligned.
    #[arg(long, global = true, default_value_t = 0.0, allow_negative_numbers = true)]
    pub c: f64,
    /// Fraction of the reference data reserved for tuning.
    #[arg(long, global = true, default_value_t = 0.2, value_parser = half_open_unit)]
    pub gamma1: f64,
    /// Fraction of the reference data used to train the predictor.
    #[arg(long, global = true, default_value_t = 0.5, value_parser = half_open_unit)]
    pub gamma2: f64,
    /// Seed for every random choice [default: 42, or the scenario's seed].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Monte Carlo replications [default: 500, or the scenario's runs].
    #[arg(long, global = true, value_parser = at_least_two)]
    pub runs: Option<usize>,
    #[arg(long, global = true, default_value_t = PredictorKind::Logistic, value_parser = predictor_kind)]
    pub predictor: PredictorKind,
    /// Failure probability of the power bounds, in (0, 1).
    #[arg(long, global = true, default_value_t = 0.05, value_parser = open_unit)]
    pub delta: f64,
    /// Comma-separated feature names [default: all available].
    #[arg(long, global = true, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = "CALIGN_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,
}

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_RUNS: usize = 500;

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generations JSONL to a records CSV of features.
    Featurize {
        #[arg(long)]
        input: PathBuf,
        /// [default: <out-dir>/records.csv]
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Split reference records and fit the alignment predictor.
    Train {
        #[arg(long)]
        input: PathBuf,
        /// [default: <out-dir>/predictor.json]
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write the calibration part of the split.
        #[arg(long)]
        calibration_out: Option<PathBuf>,
    },
    /// Select test units certified as aligned.
    Select {
        /// Labelled reference records.
        #[arg(long)]
        reference: PathBuf,
        /// Test records to screen.
        #[arg(long)]
        test: PathBuf,
        /// Fitted predictor; the whole reference set is then used for calibration.
        #[arg(long = "model")]
        model: Option<PathBuf>,
        /// [default: <out-dir>/selection.csv]
        #[arg(long)]
        output: Option<PathBuf>,
        /// [default: <out-dir>/report.json]
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Monte Carlo FDR and power curves for a simulation scenario.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// [default: <out-dir>/curves.csv]; the baseline goes next to it.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// FDR and power curves from a scenario or a labelled records file.
    Curves {
        #[command(flatten)]
        source: CurveSource,
        /// Alpha grid [default: 0.05, 0.10, ..., 0.95].
        #[arg(long, value_delimiter = ',', value_parser = open_unit)]
        alphas: Option<Vec<f64>>,
        /// Test units held out per replication for a records file [default: 20%].
        #[arg(long)]
        test_size: Option<usize>,
        /// [default: <out-dir>/curves.csv]
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-sample power bounds for a scenario at --alpha.
    Bounds {
        #[arg(long)]
        scenario: PathBuf,
        /// [default: <out-dir>/bounds.json]
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Power curves of one-feature predictors, per feature.
    SingleFeatures {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = open_unit)]
        alphas: Option<Vec<f64>>,
        #[arg(long)]
        test_size: Option<usize>,
        /// [default: <out-dir>/single_features.csv]
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct CurveSource {
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|e| e.to_string())
}

fn open_unit(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not in (0, 1)"))
    }
}

fn half_open_unit(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not in [0, 1)"))
    }
}

fn at_least_two(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e: std::num::ParseIntError| e.to_string())?;
    if v >= 2 {
        Ok(v)
    } else {
        Err("at least 2 runs are needed".into())
    }
}

fn predictor_kind(s: &str) -> Result<PredictorKind, String> {
    s.parse::<PredictorKind>().map_err(|e| e.to_string())
}
