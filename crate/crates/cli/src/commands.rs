use std::fs;
use std::path::{Path, PathBuf};

use calign_core::data::{load_dataset, split_dataset, Dataset, Role};
use calign_core::features::{FeatureName, FeatureParams};
use calign_core::generations::{featurize_records, load_generations};
use calign_core::power::{dkw_power_bounds, monte_carlo_curves, CurvePoint};
use calign_core::predictor::{
    self, single_feature_report, write_feature_report, Predictor, ReportSettings, TrainConfig,
};
use calign_core::selection::{run_pipeline, select_with_predictor, PipelineConfig, SelectionReport};
use calign_core::sim::{write_curves, Scenario};
use calign_core::Error;
use serde::Serialize;

use crate::args::{Cli, Command, GlobalOpts, DEFAULT_RUNS, DEFAULT_SEED};

/// Why a command failed.
#[derive(Debug)]
pub enum Failure {
    /// Invalid combination of otherwise well-formed arguments.
    Usage(String),
    /// Bad or unreadable input data; `stage` names the failing step.
    Data { stage: &'static str, source: Error },
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T> Stage<T> for calign_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|source| Failure::Data { stage, source })
    }
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    if g.gamma1 + g.gamma2 >= 1.0 {
        return Err(Failure::Usage(format!(
            "--gamma1 + --gamma2 = {} must be below 1",
            g.gamma1 + g.gamma2
        )));
    }
    match &cli.command {
        Command::Featurize { input, output } => featurize(g, input, &out(g, output, "records.csv")?),
        Command::Train {
            input,
            output,
            calibration_out,
        } => train(g, input, &out(g, output, "predictor.json")?, calibration_out.as_deref()),
        Command::Select {
            reference,
            test,
            model,
            output,
            report,
        } => select(
            g,
            reference,
            test,
            model.as_deref(),
            &out(g, output, "selection.csv")?,
            &out(g, report, "report.json")?,
        ),
        Command::Simulate { scenario, output } => simulate(g, scenario, &out(g, output, "curves.csv")?),
        Command::Curves {
            source,
            alphas,
            test_size,
            output,
        } => {
            let output = out(g, output, "curves.csv")?;
            match (&source.scenario, &source.reference) {
                (Some(s), _) => scenario_curves(g, s, alphas.as_deref(), &output),
                (None, Some(r)) => dataset_curves(g, r, alphas.as_deref(), *test_size, &output),
                (None, None) => unreachable!("clap requires one source"),
            }
        }
        Command::Bounds { scenario, output } => bounds(g, scenario, &out(g, output, "bounds.json")?),
        Command::SingleFeatures {
            reference,
            alphas,
            test_size,
            output,
        } => single_features(
            g,
            reference,
            alphas.as_deref(),
            *test_size,
            &out(g, output, "single_features.csv")?,
        ),
    }
}

fn out(g: &GlobalOpts, explicit: &Option<PathBuf>, default_name: &str) -> Result<PathBuf, Failure> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    fs::create_dir_all(&g.out_dir)
        .map_err(|e| Error::Io {
            path: g.out_dir.clone(),
            source: e,
        })
        .stage("output directory")?;
    Ok(g.out_dir.join(default_name))
}

fn seed(g: &GlobalOpts) -> u64 {
    g.seed.unwrap_or(DEFAULT_SEED)
}

fn default_alphas() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

fn write_file(path: &Path, contents: &[u8]) -> calign_core::Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> calign_core::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn pipeline_config(g: &GlobalOpts) -> PipelineConfig {
    PipelineConfig {
        gamma1: g.gamma1,
        gamma2: g.gamma2,
        alpha: g.alpha,
        c: g.c,
        predictor: g.predictor,
        features: g.features.clone(),
        seed: seed(g),
        train: TrainConfig::default(),
    }
}

fn featurize(g: &GlobalOpts, input: &Path, output: &Path) -> Result<(), Failure> {
    let requested = match &g.features {
        Some(names) => Some(
            names
                .iter()
                .map(|n| n.parse::<FeatureName>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Usage(format!("--features: {e}")))?,
        ),
        None => None,
    };
    let records = load_generations(input).stage("featurize: reading generations")?;
    let ds = featurize_records(&records, requested.as_deref(), &FeatureParams::default())
        .stage("featurize: computing features")?;
    ds.save(output).stage("featurize: writing records")
}

fn load_reference(g: &GlobalOpts, path: &Path, stage: &'static str) -> Result<Dataset, Failure> {
    load_dataset(path, g.features.as_deref(), Role::Reference).stage(stage)
}

fn train(g: &GlobalOpts, input: &Path, output: &Path, calibration_out: Option<&Path>) -> Result<(), Failure> {
    let reference = load_reference(g, input, "train: reading reference records")?;
    let split = split_dataset(&reference, g.gamma1, g.gamma2, seed(g)).stage("train: splitting")?;
    let cfg = TrainConfig {
        label_threshold: g.c,
        seed: seed(g),
        ..TrainConfig::default()
    };
    let model = predictor::fit(g.predictor, &split.training, &cfg).stage("train: fitting predictor")?;
    let mut json = model.to_json().stage("train: serializing predictor")?;
    json.push('\n');
    write_file(output, json.as_bytes()).stage("train: writing predictor")?;
    if let Some(path) = calibration_out {
        split
            .calibration
            .save(path)
            .stage("train: writing calibration records")?;
    }
    Ok(())
}

fn select(
    g: &GlobalOpts,
    reference: &Path,
    test: &Path,
    model: Option<&Path>,
    output: &Path,
    report_path: &Path,
) -> Result<(), Failure> {
    let report: SelectionReport = match model {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                })
                .stage("select: reading predictor")?;
            let model = Predictor::from_json(&text).stage("select: parsing predictor")?;
            let schema = Some(model.feature_names.as_slice());
            let cal = load_dataset(reference, schema, Role::Reference).stage("select: reading calibration records")?;
            let test = load_dataset(test, schema, Role::Test).stage("select: reading test records")?;
            select_with_predictor(&model, &cal, &test, g.alpha, g.c, seed(g)).stage("select")?
        }
        None => {
            let reference = load_reference(g, reference, "select: reading reference records")?;
            let test = load_dataset(test, None, Role::Test).stage("select: reading test records")?;
            run_pipeline(&reference, &test, &pipeline_config(g)).stage("select")?
        }
    };
    let mut csv = Vec::new();
    report.write_csv(&mut csv).stage("select: writing selection")?;
    write_file(output, &csv).stage("select: writing selection")?;
    write_json(report_path, &report.summary()).stage("select: writing report")
}

fn load_scenario(g: &GlobalOpts, path: &Path) -> Result<Scenario, Failure> {
    let mut sc = Scenario::load(path).stage("reading scenario")?;
    if let Some(s) = g.seed {
        sc.seed = s;
    }
    if let Some(r) = g.runs {
        sc.runs = r;
    }
    Ok(sc)
}

fn curves_to_file(points: &[CurvePoint], path: &Path) -> calign_core::Result<()> {
    let mut buf = Vec::new();
    write_curves(points, &mut buf)?;
    write_file(path, &buf)
}

fn baseline_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("curves");
    let ext = output.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    output.with_file_name(format!("{stem}_baseline.{ext}"))
}

fn simulate(g: &GlobalOpts, scenario: &Path, output: &Path) -> Result<(), Failure> {
    let sc = load_scenario(g, scenario)?;
    let points = monte_carlo_curves(sc.experiment().as_ref(), &sc.alphas, sc.runs, sc.seed).stage("simulate")?;
    curves_to_file(&points, output).stage("simulate: writing curves")?;
    if let Some(exp) = sc.baseline_experiment() {
        let base = monte_carlo_curves(exp.as_ref(), &sc.alphas, sc.runs, sc.seed).stage("simulate: baseline")?;
        curves_to_file(&base, &baseline_path(output)).stage("simulate: writing baseline curves")?;
    }
    Ok(())
}

fn scenario_curves(g: &GlobalOpts, scenario: &Path, alphas: Option<&[f64]>, output: &Path) -> Result<(), Failure> {
    let sc = load_scenario(g, scenario)?;
    let alphas = alphas.map_or_else(|| sc.alphas.clone(), <[f64]>::to_vec);
    let points = monte_carlo_curves(sc.experiment().as_ref(), &alphas, sc.runs, sc.seed).stage("curves")?;
    curves_to_file(&points, output).stage("curves: writing curves")
}

fn default_test_size(n: usize) -> usize {
    (n / 5).max(1)
}

fn dataset_curves(
    g: &GlobalOpts,
    reference: &Path,
    alphas: Option<&[f64]>,
    test_size: Option<usize>,
    output: &Path,
) -> Result<(), Failure> {
    let ds = load_reference(g, reference, "curves: reading reference records")?;
    let test_size = test_size.unwrap_or_else(|| default_test_size(ds.len()));
    let exp = calign_core::sim::HoldoutExperiment::new(ds, test_size, pipeline_config(g)).stage("curves")?;
    let alphas = alphas.map_or_else(default_alphas, <[f64]>::to_vec);
    let points = monte_carlo_curves(&exp, &alphas, g.runs.unwrap_or(DEFAULT_RUNS), seed(g)).stage("curves")?;
    curves_to_file(&points, output).stage("curves: writing curves")
}

#[derive(Serialize)]
struct BoundsOutput {
    alpha: f64,
    delta: f64,
    n_cal: usize,
    m: usize,
    lower: f64,
    upper: f64,
    tau_minus: Option<f64>,
    tau_plus: Option<f64>,
    epsilon_m: f64,
    epsilon_n: f64,
    vacuous: bool,
}

fn bounds(g: &GlobalOpts, scenario: &Path, output: &Path) -> Result<(), Failure> {
    let sc = load_scenario(g, scenario)?;
    let pool = sc.score_pool().stage("bounds: building score pool")?;
    let b = dkw_power_bounds(&pool, sc.n_cal, sc.m, g.c, g.alpha, g.delta).stage("bounds")?;
    let finite = |t: f64| t.is_finite().then_some(t);
    let result = BoundsOutput {
        alpha: g.alpha,
        delta: b.delta,
        n_cal: sc.n_cal,
        m: sc.m,
        lower: b.lower,
        upper: b.upper,
        tau_minus: finite(b.tau_minus),
        tau_plus: finite(b.tau_plus),
        epsilon_m: b.epsilon_m,
        epsilon_n: b.epsilon_n,
        vacuous: b.vacuous,
    };
    write_json(output, &result).stage("bounds: writing bounds")
}

fn single_features(
    g: &GlobalOpts,
    reference: &Path,
    alphas: Option<&[f64]>,
    test_size: Option<usize>,
    output: &Path,
) -> Result<(), Failure> {
    let ds = load_dataset(reference, None, Role::Reference).stage("single-features: reading reference records")?;
    let names = g.features.clone().unwrap_or_else(|| ds.schema().to_vec());
    let settings = ReportSettings {
        alphas: alphas.map_or_else(default_alphas, <[f64]>::to_vec),
        runs: g.runs.unwrap_or(DEFAULT_RUNS),
        test_size: test_size.unwrap_or_else(|| default_test_size(ds.len())),
    };
    let cfg = PipelineConfig {
        features: None,
        ..pipeline_config(g)
    };
    let rows = single_feature_report(&ds, &names, &cfg, &settings).stage("single-features")?;
    let mut buf = Vec::new();
    write_feature_report(&rows, &mut buf).stage("single-features: writing table")?;
    write_file(output, &buf).stage("single-features: writing table")
}
