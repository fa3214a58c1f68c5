//! Synthetic data for exercising the selection guarantees without model outputs:
//! a two-Gaussian score model, a linear-threshold feature model, and Monte Carlo
//! experiments and scenario files built on them.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{split_dataset, Dataset, Role, UnitRecord};
use crate::error::{Error, Result};
use crate::power::{realized_metrics, CurvePoint, Experiment, RealizedMetrics};
use crate::predictor::{self, PredictorKind, TrainConfig};
use crate::selection::{baseline_select, bh_select, conformal_pvalues, CalibrationPair, PipelineConfig};

/// Default upward bias of the simulated self-evaluation channel.
pub const SELF_EVAL_SHIFT: f64 = 0.3;

/// `A ~ Bernoulli(pi)`, `g | A = a ~ N(mu_a, sigma_a^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub pi: f64,
    pub mu0: f64,
    pub sigma0: f64,
    pub mu1: f64,
    pub sigma1: f64,
}

impl ScoreModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::Parameter(format!("pi = {} must lie in (0, 1)", self.pi)));
        }
        if !(self.sigma0 > 0.0 && self.sigma1 > 0.0) {
            return Err(Error::Parameter("class standard deviations must be positive".into()));
        }
        if !(self.mu0.is_finite() && self.mu1.is_finite() && self.sigma0.is_finite() && self.sigma1.is_finite()) {
            return Err(Error::Parameter("score model parameters must be finite".into()));
        }
        Ok(())
    }

    /// `P(A = 1 | g)`.
    pub fn posterior(&self, g: f64) -> f64 {
        let dens = |mu: f64, sd: f64| (-0.5 * ((g - mu) / sd).powi(2)).exp() / sd;
        let p1 = self.pi * dens(self.mu1, self.sigma1);
        let p0 = (1.0 - self.pi) * dens(self.mu0, self.sigma0);
        if p1 + p0 == 0.0 {
            // both densities underflow: the class with the wider tail wins
            return f64::from((g - self.mu1).abs() / self.sigma1 < (g - self.mu0).abs() / self.sigma0);
        }
        p1 / (p1 + p0)
    }

    /// Over-confident self-evaluation: the true posterior shifted up and clamped.
    pub fn self_eval(&self, g: f64, shift: f64) -> f64 {
        (self.posterior(g) + shift).clamp(0.0, 1.0)
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        let aligned = rng.random_bool(self.pi);
        let (mu, sd) = if aligned {
            (self.mu1, self.sigma1)
        } else {
            (self.mu0, self.sigma0)
        };
        let g = Normal::new(mu, sd).expect("validated").sample(rng);
        (g, f64::from(aligned))
    }
}

/// `X ~ N(0, I_d)`, `A = 1{w'X + intercept + noise > 0}`, `noise ~ N(0, noise_sd^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub w: Vec<f64>,
    pub noise_sd: f64,
    pub intercept: f64,
}

impl FeatureModel {
    pub fn d(&self) -> usize {
        self.w.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.is_empty() {
            return Err(Error::Parameter("feature dimension must be at least 1".into()));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise_sd = {} must be positive",
                self.noise_sd
            )));
        }
        Ok(())
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, f64) {
        let x: Vec<f64> = (0..self.d()).map(|_| StandardNormal.sample(rng)).collect();
        let noise: f64 = StandardNormal.sample(rng);
        let z: f64 = x.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.intercept + self.noise_sd * noise;
        (x, f64::from(z > 0.0))
    }
}

fn ensure_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Parameter("sample size must be at least 1".into()));
    }
    Ok(())
}

/// `n` draws of `(g, A)` from the score model.
pub fn gen_scores(model: &ScoreModel, n: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    model.validate()?;
    ensure_n(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| model.draw(&mut rng)).collect())
}

fn feature_dataset_from<R: Rng>(model: &FeatureModel, n: usize, rng: &mut R) -> Dataset {
    let records = (0..n)
        .map(|i| {
            let (x, a) = model.draw(rng);
            UnitRecord::new(format!("u{i}"), x).with_alignment(a)
        })
        .collect();
    Dataset::new(
        (1..=model.d()).map(|k| k.to_string()).collect(),
        records,
        Role::Reference,
    )
    .expect("generated records are well-formed")
}

/// Reference dataset with columns `feat_1..feat_d`.
pub fn gen_feature_dataset(model: &FeatureModel, n: usize, seed: u64) -> Result<Dataset> {
    model.validate()?;
    ensure_n(n)?;
    Ok(feature_dataset_from(model, n, &mut ChaCha8Rng::seed_from_u64(seed)))
}

fn score_dataset_from<R: Rng>(model: &ScoreModel, n: usize, self_eval_shift: Option<f64>, rng: &mut R) -> Dataset {
    let records = (0..n)
        .map(|i| {
            let (g, a) = model.draw(rng);
            let mut r = UnitRecord::new(format!("u{i}"), vec![g]).with_alignment(a);
            r.self_eval = self_eval_shift.map(|s| model.self_eval(g, s));
            r
        })
        .collect();
    Dataset::new(vec!["g".into()], records, Role::Reference).expect("generated records are well-formed")
}

/// Reference dataset with the score as feature `g` and, when `self_eval_shift`
/// is set, the over-confident self-evaluation channel.
pub fn gen_score_dataset(model: &ScoreModel, n: usize, self_eval_shift: Option<f64>, seed: u64) -> Result<Dataset> {
    model.validate()?;
    ensure_n(n)?;
    Ok(score_dataset_from(
        model,
        n,
        self_eval_shift,
        &mut ChaCha8Rng::seed_from_u64(seed),
    ))
}

/// How a replication turns test units into a selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Conformal,
    /// Threshold the self-evaluation channel at `1 - alpha`.
    Baseline {
        shift: f64,
    },
}

/// Score-model replication with the identity predictor (`Â = g`).
#[derive(Debug, Clone)]
pub struct ScoreExperiment {
    pub model: ScoreModel,
    pub n_cal: usize,
    pub m: usize,
    pub method: Method,
}

impl Experiment for ScoreExperiment {
    fn run(&self, seed: u64, alphas: &[f64]) -> Result<Vec<RealizedMetrics>> {
        self.model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cal: Vec<CalibrationPair> = (0..self.n_cal)
            .map(|_| {
                let (g, a) = self.model.draw(&mut rng);
                CalibrationPair::new(g, a)
            })
            .collect();
        let (test_g, test_a): (Vec<f64>, Vec<f64>) = (0..self.m).map(|_| self.model.draw(&mut rng)).unzip();
        match self.method {
            Method::Conformal => {
                let p = conformal_pvalues(&cal, &test_g, 0.0, seed)?;
                Ok(alphas
                    .iter()
                    .map(|&alpha| realized_metrics(&bh_select(&p, alpha).0, &test_a, 0.0))
                    .collect())
            }
            Method::Baseline { shift } => {
                let q: Vec<f64> = test_g.iter().map(|&g| self.model.self_eval(g, shift)).collect();
                Ok(alphas
                    .iter()
                    .map(|&alpha| realized_metrics(&baseline_select(&q, alpha), &test_a, 0.0))
                    .collect())
            }
        }
    }
}

/// Source of labelled synthetic units for predictor-based replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ModelSpec {
    Scores(ScoreModel),
    Features(FeatureModel),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Scores(m) => m.validate(),
            ModelSpec::Features(m) => m.validate(),
        }
    }

    fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Dataset {
        match self {
            ModelSpec::Scores(m) => score_dataset_from(m, n, None, rng),
            ModelSpec::Features(m) => feature_dataset_from(m, n, rng),
        }
    }
}

fn binary_alignment(ds: &Dataset) -> Vec<f64> {
    ds.records().iter().map(|r| r.alignment.unwrap_or(f64::NAN)).collect()
}

/// Replication that fits a predictor on fresh training data each run.
#[derive(Debug, Clone)]
pub struct PredictorExperiment {
    pub model: ModelSpec,
    pub n_train: usize,
    pub n_cal: usize,
    pub m: usize,
    pub kind: PredictorKind,
    pub train: TrainConfig,
}

impl Experiment for PredictorExperiment {
    fn run(&self, seed: u64, alphas: &[f64]) -> Result<Vec<RealizedMetrics>> {
        self.model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = self.model.sample(self.n_train, &mut rng);
        let cal = self.model.sample(self.n_cal, &mut rng);
        let test = self.model.sample(self.m, &mut rng);
        let g = predictor::fit(self.kind, &train, &TrainConfig { seed, ..self.train })?;
        let pairs: Vec<CalibrationPair> = g
            .predict_dataset(&cal)?
            .into_iter()
            .zip(binary_alignment(&cal))
            .map(|(s, a)| CalibrationPair::new(s, a))
            .collect();
        let p = conformal_pvalues(&pairs, &g.predict_dataset(&test)?, 0.0, seed)?;
        let truth = binary_alignment(&test);
        Ok(alphas
            .iter()
            .map(|&alpha| realized_metrics(&bh_select(&p, alpha).0, &truth, self.train.label_threshold))
            .collect())
    }
}

/// Replication on a fixed labelled dataset: each run holds out a random test
/// set of `test_size` units and runs the full pipeline on the remainder.
#[derive(Debug, Clone)]
pub struct HoldoutExperiment {
    pub dataset: Dataset,
    pub test_size: usize,
    pub config: PipelineConfig,
}

impl HoldoutExperiment {
    pub fn new(dataset: Dataset, test_size: usize, config: PipelineConfig) -> Result<Self> {
        if dataset.role() != Role::Reference {
            return Err(Error::Parameter(
                "holdout experiments need a labelled reference set".into(),
            ));
        }
        if test_size == 0 || test_size >= dataset.len() {
            return Err(Error::Parameter(format!(
                "test size {test_size} must be between 1 and {}",
                dataset.len().saturating_sub(1)
            )));
        }
        let dataset = match &config.features {
            Some(names) => dataset.select_features(names)?,
            None => dataset,
        };
        Ok(Self {
            dataset,
            test_size,
            config,
        })
    }
}

impl Experiment for HoldoutExperiment {
    fn run(&self, seed: u64, alphas: &[f64]) -> Result<Vec<RealizedMetrics>> {
        let n = self.dataset.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15));
        let pick = |idx: &[usize]| {
            Dataset::new(
                self.dataset.schema().to_vec(),
                idx.iter().map(|&i| self.dataset.records()[i].clone()).collect(),
                Role::Reference,
            )
            .expect("subset of a valid dataset")
        };
        let test = pick(&order[..self.test_size]);
        let reference = pick(&order[self.test_size..]);

        let cfg = &self.config;
        let split = split_dataset(&reference, cfg.gamma1, cfg.gamma2, seed)?;
        let train = TrainConfig {
            label_threshold: cfg.c,
            seed,
            ..cfg.train
        };
        let g = predictor::fit(cfg.predictor, &split.training, &train)?;
        let pairs: Vec<CalibrationPair> = g
            .predict_dataset(&split.calibration)?
            .into_iter()
            .zip(binary_alignment(&split.calibration))
            .map(|(s, a)| CalibrationPair::new(s, a))
            .collect();
        let p = conformal_pvalues(&pairs, &g.predict_dataset(&test)?, cfg.c, seed)?;
        let truth = binary_alignment(&test);
        Ok(alphas
            .iter()
            .map(|&alpha| realized_metrics(&bh_select(&p, alpha).0, &truth, cfg.c))
            .collect())
    }
}

/// Predictor used inside a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioPredictor {
    /// `Â = g`; only meaningful for the score model.
    #[default]
    Identity,
    Logistic,
    Stumps,
}

fn default_alphas() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

fn default_runs() -> usize {
    500
}

fn default_seed() -> u64 {
    42
}

/// Scenario file describing a simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub model: ModelSpec,
    pub n_cal: usize,
    pub m: usize,
    /// Training-set size for fitted predictors; defaults to `n_cal`.
    #[serde(default)]
    pub n_train: Option<usize>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub predictor: ScenarioPredictor,
    /// Also evaluate the self-evaluation baseline (score model only).
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub self_eval_shift: Option<f64>,
    /// Size of the plug-in pool used for population quantities.
    #[serde(default)]
    pub pool_size: Option<usize>,
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self> {
        let sc: Scenario = serde_json::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.n_cal == 0 || self.m == 0 {
            return Err(Error::Parameter("n_cal and m must be positive".into()));
        }
        if self.n_train == Some(0) {
            return Err(Error::Parameter("n_train must be positive".into()));
        }
        if self.alphas.is_empty() {
            return Err(Error::Parameter("empty alpha grid".into()));
        }
        for &a in &self.alphas {
            crate::selection::check_alpha(a)?;
        }
        if self.runs < 2 {
            return Err(Error::Parameter("runs must be at least 2".into()));
        }
        if self.predictor == ScenarioPredictor::Identity && !matches!(self.model, ModelSpec::Scores(_)) {
            return Err(Error::Parameter("the identity predictor needs the score model".into()));
        }
        if self.baseline && !matches!(self.model, ModelSpec::Scores(_)) {
            return Err(Error::Parameter(
                "the self-evaluation baseline needs the score model".into(),
            ));
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        self.n_train.unwrap_or(self.n_cal)
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size.unwrap_or(1_000_000)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Experiment for the conformal procedure.
    pub fn experiment(&self) -> Box<dyn Experiment> {
        let kind = match self.predictor {
            ScenarioPredictor::Identity => {
                let ModelSpec::Scores(model) = &self.model else {
                    unreachable!("validated: identity predictor implies score model")
                };
                return Box::new(ScoreExperiment {
                    model: *model,
                    n_cal: self.n_cal,
                    m: self.m,
                    method: Method::Conformal,
                });
            }
            ScenarioPredictor::Logistic => PredictorKind::Logistic,
            ScenarioPredictor::Stumps => PredictorKind::Stumps,
        };
        Box::new(PredictorExperiment {
            model: self.model.clone(),
            n_train: self.n_train(),
            n_cal: self.n_cal,
            m: self.m,
            kind,
            train: self.train_config(),
        })
    }

    /// Experiment for the self-evaluation baseline, when requested.
    pub fn baseline_experiment(&self) -> Option<Box<dyn Experiment>> {
        match (&self.model, self.baseline) {
            (ModelSpec::Scores(model), true) => Some(Box::new(ScoreExperiment {
                model: *model,
                n_cal: self.n_cal,
                m: self.m,
                method: Method::Baseline {
                    shift: self.self_eval_shift.unwrap_or(SELF_EVAL_SHIFT),
                },
            })),
            _ => None,
        }
    }

    /// Large i.i.d. pool of `(Â, A)` under the scenario's predictor. Fitted
    /// predictors are trained once on `n_train` units drawn from `seed`.
    pub fn score_pool(&self) -> Result<Vec<(f64, f64)>> {
        let n = self.pool_size();
        match (&self.model, self.predictor) {
            (ModelSpec::Scores(model), ScenarioPredictor::Identity) => gen_scores(model, n, self.seed),
            (spec, pred) => {
                let kind = if pred == ScenarioPredictor::Stumps {
                    PredictorKind::Stumps
                } else {
                    PredictorKind::Logistic
                };
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let train = spec.sample(self.n_train(), &mut rng);
                let g = predictor::fit(kind, &train, &self.train_config())?;
                let pool = spec.sample(n, &mut rng);
                Ok(g.predict_dataset(&pool)?
                    .into_iter()
                    .zip(binary_alignment(&pool))
                    .collect())
            }
        }
    }
}

/// Writes the curves CSV (`alpha,fdr_mean,fdr_sd,power_mean,power_sd,runs`),
/// rows sorted by alpha.
pub fn write_curves<W: Write>(points: &[CurvePoint], writer: W) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Parameter("no curve points to write".into()));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["alpha", "fdr_mean", "fdr_sd", "power_mean", "power_sd", "runs"])?;
    for p in &sorted {
        w.write_record([
            p.alpha.to_string(),
            p.fdr_mean.to_string(),
            p.fdr_sd.to_string(),
            p.power_mean.to_string(),
            p.power_sd.to_string(),
            p.runs.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<curves csv>", e))?;
    Ok(())
}

pub fn emit_curves(points: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_curves(points, std::io::BufWriter::new(f))
}

/// Reads a curves CSV back.
pub fn read_curves<R: std::io::Read>(reader: R) -> Result<Vec<CurvePoint>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
