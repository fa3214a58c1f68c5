//! Conformal p-values, Benjamini-Hochberg selection and the equivalent
//! score-threshold rule, plus the self-evaluation baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_dataset, Dataset, Role};
use crate::error::{Error, Result};
use crate::predictor::{self, Predictor, PredictorKind, TrainConfig};

/// Relative size of the additive tie-breaking perturbation.
pub const TIE_JITTER: f64 = 1e-12;

/// Predicted and true alignment of one calibration unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPair {
    pub a_hat: f64,
    pub a: f64,
}

impl CalibrationPair {
    pub fn new(a_hat: f64, a: f64) -> Self {
        Self { a_hat, a }
    }
}

fn check_inputs(calibration: &[CalibrationPair], test_a_hat: &[f64]) -> Result<()> {
    if calibration.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if let Some(p) = calibration.iter().find(|p| !p.a_hat.is_finite() || !p.a.is_finite()) {
        return Err(Error::NonFinite(format!("calibration pair ({}, {})", p.a_hat, p.a)));
    }
    if let Some(s) = test_a_hat.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("test score {s}")));
    }
    Ok(())
}

fn has_ties(calibration: &[CalibrationPair], test_a_hat: &[f64]) -> bool {
    let mut pooled: Vec<f64> = calibration
        .iter()
        .map(|p| p.a_hat)
        .chain(test_a_hat.iter().copied())
        .collect();
    pooled.sort_by(f64::total_cmp);
    pooled.windows(2).any(|w| w[0] == w[1])
}

/// Scores after tie-breaking. When the pooled scores contain an exact tie,
/// every score gets `u * TIE_JITTER * max(1, |score|)` added with `u ~ U(0, 1)`
/// drawn from `tie_seed` (calibration first, then test); otherwise the scores
/// are returned unchanged.
pub fn break_ties(calibration: &[CalibrationPair], test_a_hat: &[f64], tie_seed: u64) -> (Vec<f64>, Vec<f64>) {
    let cal: Vec<f64> = calibration.iter().map(|p| p.a_hat).collect();
    if !has_ties(calibration, test_a_hat) {
        return (cal, test_a_hat.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tie_seed);
    let mut jitter = |x: f64| x + rng.random::<f64>() * TIE_JITTER * x.abs().max(1.0);
    let cal = cal.into_iter().map(&mut jitter).collect();
    let test = test_a_hat.iter().map(|&x| jitter(x)).collect();
    (cal, test)
}

/// Sorted calibration scores of the null units (true alignment at most `c`).
fn null_scores(calibration: &[CalibrationPair], cal_scores: &[f64], c: f64) -> Vec<f64> {
    let mut v: Vec<f64> = calibration
        .iter()
        .zip(cal_scores)
        .filter(|(p, _)| p.a <= c)
        .map(|(_, &s)| s)
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Number of entries of ascending `sorted` that are `>= t`.
fn count_at_least(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&x| x < t)
}

fn pvalue(count: usize, n_cal: usize) -> f64 {
    (1 + count) as f64 / (n_cal + 1) as f64
}

/// BH acceptance test `p <= alpha * k / m`, shared so both selection routes
/// round identically.
fn bh_accepts(p: f64, alpha: f64, k: usize, m: usize) -> bool {
    p <= alpha * k as f64 / m as f64
}

/// `p_j = (1 + #{i : A_i <= c, Â_i >= Â_{n+j}}) / (n_cal + 1)` on tie-broken scores.
pub fn conformal_pvalues(
    calibration: &[CalibrationPair],
    test_a_hat: &[f64],
    c: f64,
    tie_seed: u64,
) -> Result<Vec<f64>> {
    check_inputs(calibration, test_a_hat)?;
    let (cal, test) = break_ties(calibration, test_a_hat, tie_seed);
    let nulls = null_scores(calibration, &cal, c);
    Ok(test
        .iter()
        .map(|&s| pvalue(count_at_least(&nulls, s), cal.len()))
        .collect())
}

/// Indices (ascending) selected by Benjamini-Hochberg, and `k*`.
pub fn bh_select(p_values: &[f64], alpha: f64) -> (Vec<usize>, usize) {
    let m = p_values.len();
    if m == 0 {
        return (Vec::new(), 0);
    }
    let mut sorted = p_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k_star = (1..=m)
        .rev()
        .find(|&k| bh_accepts(sorted[k - 1], alpha, k, m))
        .unwrap_or(0);
    if k_star == 0 {
        return (Vec::new(), 0);
    }
    let selected = (0..m).filter(|&j| bh_accepts(p_values[j], alpha, k_star, m)).collect();
    (selected, k_star)
}

/// Selects `{j : Â_{n+j} >= tau}` where `tau` is the smallest tie-broken test
/// score whose estimated FDR
/// `m / (n_cal + 1) * (1 + #{cal null >= t}) / #{test >= t}` is at most `alpha`.
/// Returns `tau = +inf` and nothing when no score qualifies.
pub fn threshold_select(
    calibration: &[CalibrationPair],
    test_a_hat: &[f64],
    c: f64,
    alpha: f64,
    tie_seed: u64,
) -> Result<(Vec<usize>, f64)> {
    check_inputs(calibration, test_a_hat)?;
    let (cal, test) = break_ties(calibration, test_a_hat, tie_seed);
    let nulls = null_scores(calibration, &cal, c);
    let m = test.len();
    let mut desc = test.clone();
    desc.sort_by(|a, b| b.total_cmp(a));

    // The estimate is rearranged as (1 + nulls)/(n + 1) <= alpha * r / m,
    // with r the number of test scores at or above t.
    let mut tau = f64::INFINITY;
    for (r, &t) in desc.iter().enumerate().map(|(i, t)| (i + 1, t)) {
        let p = pvalue(count_at_least(&nulls, t), cal.len());
        if bh_accepts(p, alpha, r, m) {
            tau = t;
        }
    }
    let selected = (0..m).filter(|&j| test[j] >= tau).collect();
    Ok((selected, tau))
}

/// Heuristic baseline: keep units whose self-evaluation is at least `1 - alpha`.
pub fn baseline_select(self_eval: &[f64], alpha: f64) -> Vec<usize> {
    (0..self_eval.len()).filter(|&j| self_eval[j] >= 1.0 - alpha).collect()
}

/// Outcome of conformal selection on a batch of test scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSelection {
    pub p_values: Vec<f64>,
    pub selected: Vec<usize>,
    pub k_star: usize,
    pub tau_hat: f64,
}

/// p-values, BH selection and the matching threshold for one `alpha`.
pub fn select_scores(
    calibration: &[CalibrationPair],
    test_a_hat: &[f64],
    c: f64,
    alpha: f64,
    tie_seed: u64,
) -> Result<ScoreSelection> {
    check_alpha(alpha)?;
    let p_values = conformal_pvalues(calibration, test_a_hat, c, tie_seed)?;
    let (selected, k_star) = bh_select(&p_values, alpha);
    let (by_threshold, tau_hat) = threshold_select(calibration, test_a_hat, c, alpha, tie_seed)?;
    debug_assert_eq!(selected, by_threshold, "BH and threshold selections disagree");
    Ok(ScoreSelection {
        p_values,
        selected,
        k_star,
        tau_hat,
    })
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    Ok(())
}

/// Settings for one end-to-end conformal alignment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub alpha: f64,
    pub c: f64,
    pub predictor: PredictorKind,
    /// Feature columns to use; `None` uses the full reference schema.
    pub features: Option<Vec<String>>,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            gamma1: 0.2,
            gamma2: 0.5,
            alpha: 0.1,
            c: 0.0,
            predictor: PredictorKind::Logistic,
            features: None,
            seed: 42,
            train: TrainConfig::default(),
        }
    }
}

/// Per-test-unit selection output plus run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub unit_ids: Vec<String>,
    pub a_hat: Vec<f64>,
    pub p_values: Vec<f64>,
    pub selected: Vec<bool>,
    pub k_star: usize,
    /// `+inf` when nothing is selected.
    pub tau_hat: f64,
    pub alpha: f64,
    pub c: f64,
    pub seed: u64,
    pub n_cal: usize,
    pub m: usize,
    pub predictor: PredictorKind,
}

/// JSON summary of a selection run; `tau_hat` is `null` when nothing is selected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub alpha: f64,
    pub c: f64,
    pub k_star: usize,
    pub tau_hat: Option<f64>,
    pub n_cal: usize,
    pub m: usize,
    pub seed: u64,
    pub predictor: PredictorKind,
}

impl SelectionReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            alpha: self.alpha,
            c: self.c,
            k_star: self.k_star,
            tau_hat: self.tau_hat.is_finite().then_some(self.tau_hat),
            n_cal: self.n_cal,
            m: self.m,
            seed: self.seed,
            predictor: self.predictor,
        }
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        (0..self.m).filter(|&j| self.selected[j]).collect()
    }

    /// Selection CSV: `unit_id,a_hat,p_value,selected`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit_id", "a_hat", "p_value", "selected"])?;
        for j in 0..self.m {
            w.write_record([
                self.unit_ids[j].clone(),
                self.a_hat[j].to_string(),
                self.p_values[j].to_string(),
                u8::from(self.selected[j]).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<selection csv>", e))?;
        Ok(())
    }
}

/// Conformal selection with an already fitted predictor: `calibration` must be
/// disjoint from the predictor's training data.
pub fn select_with_predictor(
    predictor: &Predictor,
    calibration: &Dataset,
    test: &Dataset,
    alpha: f64,
    c: f64,
    seed: u64,
) -> Result<SelectionReport> {
    if calibration.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if calibration.role() != Role::Reference {
        return Err(Error::Parameter("calibration data must be a reference dataset".into()));
    }
    let cal_scores = predictor.predict_dataset(calibration)?;
    let pairs: Vec<CalibrationPair> = cal_scores
        .iter()
        .zip(calibration.records())
        .map(|(&s, r)| CalibrationPair::new(s, r.alignment.expect("reference records carry alignment")))
        .collect();
    let a_hat = predictor.predict_dataset(test)?;
    let sel = select_scores(&pairs, &a_hat, c, alpha, seed)?;
    let mut selected = vec![false; a_hat.len()];
    for &j in &sel.selected {
        selected[j] = true;
    }
    Ok(SelectionReport {
        unit_ids: test.records().iter().map(|r| r.unit_id.clone()).collect(),
        m: a_hat.len(),
        a_hat,
        p_values: sel.p_values,
        selected,
        k_star: sel.k_star,
        tau_hat: sel.tau_hat,
        alpha,
        c,
        seed,
        n_cal: pairs.len(),
        predictor: predictor.kind,
    })
}

/// Split the reference set, fit the predictor on the training part, score the
/// calibration and test units and select by BH on the conformal p-values.
pub fn run_pipeline(reference: &Dataset, test: &Dataset, config: &PipelineConfig) -> Result<SelectionReport> {
    check_alpha(config.alpha)?;
    let reference = match &config.features {
        Some(names) => reference.select_features(names)?,
        None => reference.clone(),
    };
    let split = split_dataset(&reference, config.gamma1, config.gamma2, config.seed)?;
    let train = TrainConfig {
        label_threshold: config.c,
        seed: config.seed,
        ..config.train
    };
    let g = predictor::fit(config.predictor, &split.training, &train)?;
    select_with_predictor(&g, &split.calibration, test, config.alpha, config.c, config.seed)
}
