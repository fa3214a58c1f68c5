//! Realized FDR and power, Monte Carlo curves, the large-sample power limit
//! and finite-sample DKW power bounds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// False discovery proportion and power of one selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealizedMetrics {
    pub fdp: f64,
    pub power: f64,
    pub selected_count: usize,
    pub aligned_count: usize,
}

/// `fdp = #{S, A <= c} / max(|S|, 1)`, `power = #{S, A > c} / max(#{A > c}, 1)`.
pub fn realized_metrics(selected: &[usize], test_alignment: &[f64], c: f64) -> RealizedMetrics {
    let false_sel = selected.iter().filter(|&&j| test_alignment[j] <= c).count();
    let true_sel = selected.len() - false_sel;
    let aligned = test_alignment.iter().filter(|&&a| a > c).count();
    RealizedMetrics {
        fdp: false_sel as f64 / selected.len().max(1) as f64,
        power: true_sel as f64 / aligned.max(1) as f64,
        selected_count: selected.len(),
        aligned_count: aligned,
    }
}

/// One randomized replication evaluated on a grid of target levels.
pub trait Experiment: Sync {
    /// Metrics for each entry of `alphas`, in order, for the replication `seed`.
    fn run(&self, seed: u64, alphas: &[f64]) -> Result<Vec<RealizedMetrics>>;
}

/// Per-level summary across replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub fdr_mean: f64,
    pub fdr_sd: f64,
    pub power_mean: f64,
    pub power_sd: f64,
    pub runs: usize,
}

impl CurvePoint {
    /// Monte Carlo standard error of `fdr_mean`.
    pub fn fdr_se(&self) -> f64 {
        self.fdr_sd / (self.runs as f64).sqrt()
    }

    pub fn power_se(&self) -> f64 {
        self.power_sd / (self.runs as f64).sqrt()
    }
}

fn mean_sd(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `experiment` once per seed (in parallel) and summarizes each level.
/// Reduction walks the results in seed order, so output is bit-reproducible.
pub fn curves_from_seeds(experiment: &dyn Experiment, alphas: &[f64], seeds: &[u64]) -> Result<Vec<CurvePoint>> {
    if seeds.len() < 2 {
        return Err(Error::Parameter("Monte Carlo curves need at least two runs".into()));
    }
    if alphas.is_empty() {
        return Err(Error::Parameter("empty alpha grid".into()));
    }
    let results: Vec<Vec<RealizedMetrics>> = seeds
        .par_iter()
        .map(|&s| experiment.run(s, alphas))
        .collect::<Result<_>>()?;
    Ok(alphas
        .iter()
        .enumerate()
        .map(|(a, &alpha)| {
            let (fdr_mean, fdr_sd) = mean_sd(results.iter().map(|r| r[a].fdp));
            let (power_mean, power_sd) = mean_sd(results.iter().map(|r| r[a].power));
            CurvePoint {
                alpha,
                fdr_mean,
                fdr_sd,
                power_mean,
                power_sd,
                runs: seeds.len(),
            }
        })
        .collect())
}

/// `runs` replications with seeds `base_seed + r`.
pub fn monte_carlo_curves(
    experiment: &dyn Experiment,
    alphas: &[f64],
    runs: usize,
    base_seed: u64,
) -> Result<Vec<CurvePoint>> {
    let seeds: Vec<u64> = (0..runs as u64).map(|r| base_seed.wrapping_add(r)).collect();
    curves_from_seeds(experiment, alphas, &seeds)
}

fn validate_pool(pool: &[(f64, f64)], c: f64) -> Result<()> {
    if let Some(p) = pool.iter().find(|(g, a)| !g.is_finite() || !a.is_finite()) {
        return Err(Error::NonFinite(format!("pool entry ({}, {})", p.0, p.1)));
    }
    let aligned = pool.iter().filter(|(_, a)| *a > c).count();
    if aligned == 0 || aligned == pool.len() {
        return Err(Error::Parameter(
            "pool must contain both aligned and non-aligned units".into(),
        ));
    }
    Ok(())
}

/// Plug-in estimates of the large-sample selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticPower {
    /// `t(alpha) = sup {t : t / P(H(g) <= t) <= alpha}`.
    pub t_alpha: f64,
    /// `P(H(g) <= t(alpha) | A > c)`.
    pub asymptotic_power: f64,
    /// `P(H(g) <= t(alpha), A > c)`.
    pub deploy_fraction: f64,
    /// Smallest pool score that is selected by the limiting rule (`+inf` if none).
    pub score_cutoff: f64,
}

/// `H(g_i) = P(A <= c, g >= g_i)` for every pool entry, with the pool order
/// sorted by descending score.
fn null_tail_mass(pool: &[(f64, f64)], c: f64) -> (Vec<usize>, Vec<f64>) {
    let n = pool.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| pool[j].0.total_cmp(&pool[i].0));
    let mut h = vec![0.0; n];
    let mut nulls = 0usize;
    let mut i = 0;
    while i < n {
        // equal scores share the tail count
        let mut j = i;
        while j < n && pool[order[j]].0 == pool[order[i]].0 {
            if pool[order[j]].1 <= c {
                nulls += 1;
            }
            j += 1;
        }
        for &k in &order[i..j] {
            h[k] = nulls as f64 / n as f64;
        }
        i = j;
    }
    (order, h)
}

/// Large-sample power of conformal alignment estimated from a big i.i.d. pool
/// of `(g(X), A)` pairs.
pub fn asymptotic_power_oracle(pool: &[(f64, f64)], c: f64, alpha: f64) -> Result<AsymptoticPower> {
    crate::selection::check_alpha(alpha)?;
    validate_pool(pool, c)?;
    let n = pool.len();
    let (order, h) = null_tail_mass(pool, c);

    // Along descending scores h is non-decreasing. On [h_k, h_next) the mass
    // P(H <= t) is constant at count/n, so the feasible part of that piece is
    // t <= alpha * count / n.
    let mut t_alpha = f64::NEG_INFINITY;
    let mut i = 0;
    while i < n {
        let hk = h[order[i]];
        let mut j = i;
        while j < n && h[order[j]] == hk {
            j += 1;
        }
        let cap = alpha * j as f64 / n as f64;
        if cap >= hk {
            let upper = if j < n { h[order[j]] } else { f64::INFINITY };
            t_alpha = t_alpha.max(cap.min(upper));
        }
        i = j;
    }

    let aligned = pool.iter().filter(|(_, a)| *a > c).count();
    let mut hits = 0usize;
    let mut cutoff = f64::INFINITY;
    for k in 0..n {
        if h[k] <= t_alpha {
            cutoff = cutoff.min(pool[k].0);
            if pool[k].1 > c {
                hits += 1;
            }
        }
    }
    Ok(AsymptoticPower {
        t_alpha,
        asymptotic_power: hits as f64 / aligned as f64,
        deploy_fraction: hits as f64 / n as f64,
        score_cutoff: cutoff,
    })
}

/// Finite-sample power interval holding with probability at least `1 - delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerBounds {
    pub lower: f64,
    pub upper: f64,
    /// Threshold from the optimistic FDR envelope (`+inf` when none qualifies).
    pub tau_minus: f64,
    /// Threshold from the pessimistic FDR envelope (`+inf` when none qualifies).
    pub tau_plus: f64,
    pub epsilon_m: f64,
    pub epsilon_n: f64,
    pub delta: f64,
    pub vacuous: bool,
}

/// DKW radius `sqrt(ln(8 / delta) / (2 n))`.
pub fn dkw_epsilon(delta: f64, n: usize) -> f64 {
    ((8.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// Upper-tail functionals `F+(t) = P(g >= t, A > c)`, `F-(t) = P(g >= t, A <= c)`
/// and `F(t) = P(g >= t)` evaluated at each distinct pool score, ascending.
struct TailFunctions {
    t: Vec<f64>,
    f_plus: Vec<f64>,
    f_minus: Vec<f64>,
    f_all: Vec<f64>,
    pi_aligned: f64,
}

impl TailFunctions {
    fn from_pool(pool: &[(f64, f64)], c: f64) -> Self {
        let n = pool.len() as f64;
        let mut sorted: Vec<(f64, bool)> = pool.iter().map(|&(g, a)| (g, a > c)).collect();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (mut t, mut f_plus, mut f_minus, mut f_all) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let (mut pos, mut neg) = (0usize, 0usize);
        let mut i = 0;
        while i < sorted.len() {
            let g = sorted[i].0;
            while i < sorted.len() && sorted[i].0 == g {
                if sorted[i].1 {
                    pos += 1;
                } else {
                    neg += 1;
                }
                i += 1;
            }
            t.push(g);
            f_plus.push(pos as f64 / n);
            f_minus.push(neg as f64 / n);
            f_all.push((pos + neg) as f64 / n);
        }
        for v in [&mut t, &mut f_plus, &mut f_minus, &mut f_all] {
            v.reverse();
        }
        Self {
            t,
            f_plus,
            f_minus,
            f_all,
            pi_aligned: pos as f64 / n,
        }
    }

    /// Smallest score whose envelope `(1 + n F- + shift) / ((n + 1)(F + widen))`
    /// is at most alpha; returns the index into the ascending grid.
    fn first_feasible(&self, n_cal: usize, alpha: f64, numer_shift: f64, denom_shift: f64) -> Option<usize> {
        let n = n_cal as f64;
        (0..self.t.len()).find(|&i| {
            let denom = self.f_all[i] + denom_shift;
            denom > 0.0 && (1.0 + n * self.f_minus[i] + numer_shift) / ((n + 1.0) * denom) <= alpha
        })
    }
}

/// DKW-based interval for the realized power of conformal alignment with
/// `n_cal` calibration and `m` test units, using pool plug-ins for the
/// population tail functions.
///
/// The pessimistic envelope yields the larger threshold `tau_plus` and hence
/// the lower power bound; the optimistic one yields `tau_minus` and the upper
/// bound.
pub fn dkw_power_bounds(
    pool: &[(f64, f64)],
    n_cal: usize,
    m: usize,
    c: f64,
    alpha: f64,
    delta: f64,
) -> Result<PowerBounds> {
    crate::selection::check_alpha(alpha)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Parameter(format!("delta = {delta} must lie in (0, 1)")));
    }
    if n_cal == 0 || m == 0 {
        return Err(Error::Parameter("n_cal and m must be positive".into()));
    }
    validate_pool(pool, c)?;
    let eps_m = dkw_epsilon(delta, m);
    let eps_n = dkw_epsilon(delta, n_cal);
    let tails = TailFunctions::from_pool(pool, c);
    let n = n_cal as f64;

    let vacuous = tails.f_all.iter().all(|&f| f - eps_m <= 0.0);
    if vacuous {
        return Ok(PowerBounds {
            lower: 0.0,
            upper: 1.0,
            tau_minus: f64::INFINITY,
            tau_plus: f64::INFINITY,
            epsilon_m: eps_m,
            epsilon_n: eps_n,
            delta,
            vacuous,
        });
    }

    let plus = tails.first_feasible(n_cal, alpha, n * eps_n, -eps_m);
    let minus = tails.first_feasible(n_cal, alpha, -n * eps_n, eps_m);
    let f_plus_at = |i: Option<usize>| i.map_or(0.0, |i| tails.f_plus[i]);
    let pi = tails.pi_aligned;

    let lower = ((f_plus_at(plus) - eps_m) / (pi + eps_m)).clamp(0.0, 1.0);
    let upper = if pi - eps_m > 0.0 {
        ((f_plus_at(minus) + eps_m) / (pi - eps_m)).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(PowerBounds {
        lower,
        upper,
        tau_minus: minus.map_or(f64::INFINITY, |i| tails.t[i]),
        tau_plus: plus.map_or(f64::INFINITY, |i| tails.t[i]),
        epsilon_m: eps_m,
        epsilon_n: eps_n,
        delta,
        vacuous,
    })
}
