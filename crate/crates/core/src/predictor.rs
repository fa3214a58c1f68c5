//! Alignment score predictors: L2-regularized logistic regression and a bagged
//! ensemble of shallow Gini trees. Both standardize features with training
//! statistics and always emit scores in [0, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, UnitRecord};
use crate::error::{Error, Result};
use crate::power::{monte_carlo_curves, CurvePoint};
use crate::selection::PipelineConfig;
use crate::sim::HoldoutExperiment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Logistic,
    Stumps,
}

impl std::fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PredictorKind::Logistic => "logistic",
            PredictorKind::Stumps => "stumps",
        })
    }
}

impl std::str::FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(PredictorKind::Logistic),
            "stumps" => Ok(PredictorKind::Stumps),
            _ => Err(Error::Parameter(format!("unknown predictor kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub l2_lambda: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub n_trees: usize,
    pub max_depth: usize,
    /// Units with alignment above this value are the positive class.
    pub label_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l2_lambda: 1e-4,
            max_iters: 10_000,
            grad_tol: 1e-8,
            n_trees: 100,
            max_depth: 3,
            label_threshold: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::Parameter(format!("l2_lambda {} must be >= 0", self.l2_lambda)));
        }
        if self.grad_tol.is_nan() || self.grad_tol <= 0.0 {
            return Err(Error::Parameter("grad_tol must be positive".into()));
        }
        if self.n_trees == 0 || self.max_depth == 0 {
            return Err(Error::Parameter(
                "ensemble needs at least one tree of depth >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-feature centering and scaling learned from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardization {
    fn fit(x: &[Vec<f64>], d: usize) -> Self {
        let n = x.len().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|k| x.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let sd = (0..d)
            .map(|k| {
                let v = x.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                // constant columns map to zero instead of dividing by zero
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, sd }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Flat tree; node 0 is the root. Rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum Parameters {
    Constant { value: f64 },
    Logistic { weights: Vec<f64>, bias: f64 },
    Ensemble { trees: Vec<Tree> },
}

/// A fitted alignment predictor `g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub kind: PredictorKind,
    pub feature_names: Vec<String>,
    pub standardization: Standardization,
    pub parameters: Parameters,
    /// Set when the training labels had a single class.
    #[serde(default)]
    pub degenerate: bool,
}

impl Predictor {
    /// Logistic predictor with the given raw-scale-free parameters, no standardization.
    pub fn logistic(feature_names: Vec<String>, weights: Vec<f64>, bias: f64) -> Self {
        let d = feature_names.len();
        Self {
            kind: PredictorKind::Logistic,
            feature_names,
            standardization: Standardization {
                mean: vec![0.0; d],
                sd: vec![1.0; d],
            },
            parameters: Parameters::Logistic { weights, bias },
            degenerate: false,
        }
    }

    pub fn constant(kind: PredictorKind, feature_names: Vec<String>, value: f64) -> Self {
        let d = feature_names.len();
        Self {
            kind,
            feature_names,
            standardization: Standardization {
                mean: vec![0.0; d],
                sd: vec![1.0; d],
            },
            parameters: Parameters::Constant { value },
            degenerate: true,
        }
    }

    /// Score for one raw feature row, in [0, 1].
    pub fn predict_row(&self, row: &[f64]) -> Result<f64> {
        if row.len() != self.feature_names.len() {
            return Err(Error::LengthMismatch {
                expected: self.feature_names.len(),
                actual: row.len(),
            });
        }
        if let Some(x) = row.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {x}")));
        }
        let z = self.standardization.apply(row);
        let p = match &self.parameters {
            Parameters::Constant { value } => *value,
            Parameters::Logistic { weights, bias } => sigmoid(dot(weights, &z) + bias),
            Parameters::Ensemble { trees } => trees.iter().map(|t| t.predict(&z)).sum::<f64>() / trees.len() as f64,
        };
        Ok(p.clamp(0.0, 1.0))
    }

    /// Scores every record of `dataset`, matching columns by name.
    pub fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        let aligned = dataset.select_features(&self.feature_names)?;
        aligned
            .records()
            .iter()
            .map(|r| self.predict_row(&r.features))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// `g(X)` for a record whose features follow the predictor's column order.
pub fn predict_alignment(predictor: &Predictor, record: &UnitRecord) -> Result<f64> {
    predictor.predict_row(&record.features)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Training matrix and binary labels pulled out of a dataset.
struct Design {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

fn design(training: &Dataset, label_threshold: f64) -> Result<Design> {
    let mut x = Vec::with_capacity(training.len());
    let mut y = Vec::with_capacity(training.len());
    for r in training.records() {
        if let Some(v) = r.features.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {v} in unit `{}`", r.unit_id)));
        }
        let a = r
            .alignment
            .ok_or_else(|| Error::Schema(format!("training unit `{}` has no alignment", r.unit_id)))?;
        x.push(r.features.clone());
        y.push(if a > label_threshold { 1.0 } else { 0.0 });
    }
    if x.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    Ok(Design { x, y })
}

/// Degenerate single-class training data: the constant predictor at the class rate.
fn single_class(kind: PredictorKind, training: &Dataset, y: &[f64]) -> Option<Predictor> {
    let rate = y.iter().sum::<f64>() / y.len() as f64;
    (rate == 0.0 || rate == 1.0).then(|| Predictor::constant(kind, training.schema().to_vec(), rate))
}

/// Regularized mean negative log-likelihood over standardized rows.
/// `theta` holds the weights followed by the bias; the bias is not penalized.
pub fn logistic_objective(theta: &[f64], x: &[Vec<f64>], y: &[f64], l2_lambda: f64) -> f64 {
    let d = theta.len() - 1;
    let (w, b) = (&theta[..d], theta[d]);
    let n = x.len() as f64;
    let nll: f64 = x
        .iter()
        .zip(y)
        .map(|(row, &yi)| {
            let z = dot(w, row) + b;
            softplus(z) - yi * z
        })
        .sum::<f64>()
        / n;
    nll + 0.5 * l2_lambda * dot(w, w)
}

pub fn logistic_gradient(theta: &[f64], x: &[Vec<f64>], y: &[f64], l2_lambda: f64) -> Vec<f64> {
    let d = theta.len() - 1;
    let (w, b) = (&theta[..d], theta[d]);
    let n = x.len() as f64;
    let mut g = vec![0.0; d + 1];
    for (row, &yi) in x.iter().zip(y) {
        let r = sigmoid(dot(w, row) + b) - yi;
        for k in 0..d {
            g[k] += r * row[k];
        }
        g[d] += r;
    }
    for k in 0..d {
        g[k] = g[k] / n + l2_lambda * w[k];
    }
    g[d] /= n;
    g
}

/// Result of a logistic fit together with the objective value after each
/// accepted step (the first entry is the starting point).
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub predictor: Predictor,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Gradient descent with Armijo backtracking on the regularized logistic loss.
pub fn fit_logistic_traced(training: &Dataset, config: &TrainConfig) -> Result<LogisticFit> {
    config.validate()?;
    let Design { x, y } = design(training, config.label_threshold)?;
    if let Some(p) = single_class(PredictorKind::Logistic, training, &y) {
        return Ok(LogisticFit {
            predictor: p,
            objective_trace: Vec::new(),
            iterations: 0,
            converged: true,
        });
    }
    let d = training.schema().len();
    let standardization = Standardization::fit(&x, d);
    let xs: Vec<Vec<f64>> = x.iter().map(|r| standardization.apply(r)).collect();

    let mut theta = vec![0.0; d + 1];
    let mut f = logistic_objective(&theta, &xs, &y, config.l2_lambda);
    let mut trace = vec![f];
    let mut step: f64 = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let g = logistic_gradient(&theta, &xs, &y, config.l2_lambda);
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < config.grad_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let g2 = dot(&g, &g);
        // allow the step to grow again after a run of easy iterations
        step = (step * 2.0).min(1e6);
        let mut accepted = None;
        while step > 1e-20 {
            let cand: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - step * gi).collect();
            let fc = logistic_objective(&cand, &xs, &y, config.l2_lambda);
            if fc <= f - 0.5 * step * g2 {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, fc)) => {
                theta = cand;
                f = fc;
                trace.push(f);
            }
            // no decrease representable in floating point: at the optimum
            None => {
                converged = true;
                break;
            }
        }
    }

    Ok(LogisticFit {
        predictor: Predictor {
            kind: PredictorKind::Logistic,
            feature_names: training.schema().to_vec(),
            standardization,
            parameters: Parameters::Logistic {
                weights: theta[..d].to_vec(),
                bias: theta[d],
            },
            degenerate: false,
        },
        objective_trace: trace,
        iterations,
        converged,
    })
}

pub fn fit_logistic(training: &Dataset, config: &TrainConfig) -> Result<Predictor> {
    fit_logistic_traced(training, config).map(|f| f.predictor)
}

fn gini(pos: f64, n: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    let p = pos / n;
    2.0 * p * (1.0 - p)
}

#[allow(clippy::needless_range_loop)]
fn grow(
    nodes: &mut Vec<TreeNode>,
    x: &[Vec<f64>],
    y: &[f64],
    idx: &mut [usize],
    depth: usize,
    max_depth: usize,
) -> usize {
    let n = idx.len() as f64;
    let pos: f64 = idx.iter().map(|&i| y[i]).sum();
    let me = nodes.len();
    nodes.push(TreeNode::Leaf { value: pos / n });
    if depth >= max_depth || pos == 0.0 || pos == n {
        return me;
    }

    let parent = gini(pos, n) * n;
    let d = x[idx[0]].len();
    let mut best: Option<(f64, usize, f64)> = None;
    for k in 0..d {
        idx.sort_by(|&a, &b| x[a][k].total_cmp(&x[b][k]));
        let mut left_pos = 0.0;
        for s in 1..idx.len() {
            left_pos += y[idx[s - 1]];
            let (lo, hi) = (x[idx[s - 1]][k], x[idx[s]][k]);
            if lo == hi {
                continue;
            }
            let nl = s as f64;
            let impurity = gini(left_pos, nl) * nl + gini(pos - left_pos, n - nl) * (n - nl);
            let gain = parent - impurity;
            if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, k, lo + (hi - lo) / 2.0));
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return me;
    };
    let split = partition_in_place(idx, |&i| x[i][feature] <= threshold);
    let (l, r) = idx.split_at_mut(split);
    let left = grow(nodes, x, y, l, depth + 1, max_depth);
    let right = grow(nodes, x, y, r, depth + 1, max_depth);
    nodes[me] = TreeNode::Split {
        feature,
        threshold,
        left,
        right,
    };
    me
}

/// Stable in-place partition; returns the number of elements satisfying `pred`.
fn partition_in_place(v: &mut [usize], pred: impl Fn(&usize) -> bool) -> usize {
    let (yes, no): (Vec<usize>, Vec<usize>) = v.iter().partition(|i| pred(i));
    let k = yes.len();
    v[..k].copy_from_slice(&yes);
    v[k..].copy_from_slice(&no);
    k
}

/// Bootstrap-bagged Gini trees of depth at most `config.max_depth`.
pub fn fit_stump_ensemble(training: &Dataset, config: &TrainConfig) -> Result<Predictor> {
    config.validate()?;
    let Design { x, y } = design(training, config.label_threshold)?;
    if let Some(p) = single_class(PredictorKind::Stumps, training, &y) {
        return Ok(p);
    }
    let d = training.schema().len();
    let standardization = Standardization::fit(&x, d);
    let xs: Vec<Vec<f64>> = x.iter().map(|r| standardization.apply(r)).collect();
    let n = xs.len();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let trees = (0..config.n_trees)
        .map(|_| {
            let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut nodes = Vec::new();
            grow(&mut nodes, &xs, &y, &mut idx, 0, config.max_depth);
            Tree { nodes }
        })
        .collect();

    Ok(Predictor {
        kind: PredictorKind::Stumps,
        feature_names: training.schema().to_vec(),
        standardization,
        parameters: Parameters::Ensemble { trees },
        degenerate: false,
    })
}

pub fn fit(kind: PredictorKind, training: &Dataset, config: &TrainConfig) -> Result<Predictor> {
    match kind {
        PredictorKind::Logistic => fit_logistic(training, config),
        PredictorKind::Stumps => fit_stump_ensemble(training, config),
    }
}

/// Realized FDR and power for one feature at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCurve {
    pub feature: String,
    #[serde(flatten)]
    pub point: CurvePoint,
}

/// Monte Carlo settings shared by every feature in a single-feature report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSettings {
    pub alphas: Vec<f64>,
    pub runs: usize,
    /// Units held out as the test set in each replication.
    pub test_size: usize,
}

/// Runs the full pipeline with a one-feature logistic predictor for each named
/// feature and reports realized FDR and power over the alpha grid. Rows are
/// ordered by feature (input order) then alpha.
pub fn single_feature_report(
    reference: &Dataset,
    feature_names: &[String],
    config: &PipelineConfig,
    settings: &ReportSettings,
) -> Result<Vec<FeatureCurve>> {
    for name in feature_names {
        if reference.feature_index(name).is_none() {
            return Err(Error::Schema(format!(
                "feature {name:?} not present in the reference data"
            )));
        }
    }
    let mut rows = Vec::new();
    for name in feature_names {
        let cfg = PipelineConfig {
            predictor: PredictorKind::Logistic,
            features: Some(vec![name.clone()]),
            ..config.clone()
        };
        let exp = HoldoutExperiment::new(reference.clone(), settings.test_size, cfg)?;
        let mut points = monte_carlo_curves(&exp, &settings.alphas, settings.runs, config.seed)?;
        points.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
        rows.extend(points.into_iter().map(|point| FeatureCurve {
            feature: name.clone(),
            point,
        }));
    }
    Ok(rows)
}

/// CSV with columns `feature,alpha,fdr_mean,fdr_sd,power_mean,power_sd,runs`.
pub fn write_feature_report<W: std::io::Write>(rows: &[FeatureCurve], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "feature",
        "alpha",
        "fdr_mean",
        "fdr_sd",
        "power_mean",
        "power_sd",
        "runs",
    ])?;
    for r in rows {
        let p = &r.point;
        w.write_record([
            r.feature.clone(),
            p.alpha.to_string(),
            p.fdr_mean.to_string(),
            p.fdr_sd.to_string(),
            p.power_mean.to_string(),
            p.power_sd.to_string(),
            p.runs.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<feature report csv>", e))?;
    Ok(())
}
