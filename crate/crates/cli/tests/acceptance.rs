//! Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Run with `cargo test -p calign --test acceptance --release` for speed; the
//! debug build runs the same checks.

mod common;

use std::time::Instant;

use calign_core::alignment::{rouge_l, TokenSequence};
use calign_core::data::Role;
use calign_core::features::{
    eigv_feature, featurize_unit, laplacian_spectrum, semantic_entropy, similarity_matrix, FeatureName, FeatureParams,
    GenerationBundle, ProbMatrix, SimilarityMatrix,
};
use calign_core::power::{
    asymptotic_power_oracle, dkw_epsilon, dkw_power_bounds, monte_carlo_curves, realized_metrics, Experiment,
};
use calign_core::predictor::{fit_logistic, fit_logistic_traced, logistic_gradient, logistic_objective, TrainConfig};
use calign_core::selection::{
    baseline_select, bh_select, conformal_pvalues, run_pipeline, threshold_select, CalibrationPair, PipelineConfig,
};
use calign_core::sim::{
    gen_feature_dataset, gen_score_dataset, gen_scores, FeatureModel, Method, ScoreExperiment, ScoreModel,
};
use calign_core::{Dataset, UnitRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const GAUSSIAN: ScoreModel = ScoreModel {
    pi: 0.6,
    mu0: 0.0,
    sigma0: 1.0,
    mu1: 1.5,
    sigma1: 1.0,
};

fn grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn fdr_control() -> Outcome {
    let exp = ScoreExperiment {
        model: GAUSSIAN,
        n_cal: 500,
        m: 500,
        method: Method::Conformal,
    };
    let pts = monte_carlo_curves(&exp, &grid(), 500, 1).map_err(|e| e.to_string())?;
    let worst = pts
        .iter()
        .map(|p| p.fdr_mean - (p.alpha + 2.0 * p.fdr_se()))
        .fold(f64::NEG_INFINITY, f64::max);
    check(
        worst <= 0.0,
        format!(
            "mean FDP <= alpha + 2 SE at all 19 levels (max slack used {:.4})",
            worst
        ),
        format!("mean FDP exceeds alpha + 2 SE by {worst:.4}"),
    )
}

fn pairs(s: &[f64], a: &[f64]) -> Vec<CalibrationPair> {
    s.iter().zip(a).map(|(&s, &a)| CalibrationPair::new(s, a)).collect()
}

fn bh_threshold_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for inst in 0..1000u64 {
        let n = rng.random_range(1..=50);
        let m = rng.random_range(1..=50);
        // a coarse grid in some instances forces ties
        let coarse = rng.random_bool(0.3);
        let score = |rng: &mut ChaCha8Rng| {
            let u: f64 = rng.random();
            if coarse {
                (u * 5.0).floor() / 5.0
            } else {
                u
            }
        };
        let cal_s: Vec<f64> = (0..n).map(|_| score(&mut rng)).collect();
        let cal_a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let test: Vec<f64> = (0..m).map(|_| score(&mut rng)).collect();
        let c: f64 = rng.random();
        let alpha: f64 = rng.random_range(0.01..0.99);
        let cal = pairs(&cal_s, &cal_a);
        let p = conformal_pvalues(&cal, &test, c, inst).map_err(|e| e.to_string())?;
        let (bh, _) = bh_select(&p, alpha);
        let (thr, _) = threshold_select(&cal, &test, c, alpha, inst).map_err(|e| e.to_string())?;
        if bh != thr {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        "1000/1000 instances give identical selection sets".into(),
        format!("{mismatches} of 1000 instances differ"),
    )
}

fn super_uniformity() -> Outcome {
    let draws = 100_000;
    let n_cal = 19;
    let c = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ts = grid();
    let mut hits = vec![0usize; ts.len()];
    for d in 0..draws {
        // exchangeable (score, continuous alignment) pairs with dependence
        let draw = |rng: &mut ChaCha8Rng| {
            let a: f64 = rng.random();
            let s = a + rng.random_range(-0.5..0.5);
            (s, a)
        };
        let cal: Vec<CalibrationPair> = (0..n_cal)
            .map(|_| {
                let (s, a) = draw(&mut rng);
                CalibrationPair::new(s, a)
            })
            .collect();
        let (s, a) = draw(&mut rng);
        let p = conformal_pvalues(&cal, &[s], c, d as u64).map_err(|e| e.to_string())?[0];
        for (h, &t) in hits.iter_mut().zip(&ts) {
            if p <= t && a <= c {
                *h += 1;
            }
        }
    }
    let n = draws as f64;
    let worst = ts
        .iter()
        .zip(&hits)
        .map(|(&t, &h)| h as f64 / n - (t + 3.0 * (t * (1.0 - t) / n).sqrt()))
        .fold(f64::NEG_INFINITY, f64::max);
    check(
        worst <= 0.0,
        format!("P(p <= t, A <= c) <= t + 3 SE at 19 levels over {draws} draws"),
        format!("violation by {worst:.5}"),
    )
}

fn asymptotic_power_consistency() -> Outcome {
    let pool = gen_scores(&GAUSSIAN, 1_000_000, 4).map_err(|e| e.to_string())?;
    let exp = ScoreExperiment {
        model: GAUSSIAN,
        n_cal: 5000,
        m: 5000,
        method: Method::Conformal,
    };
    let alphas = grid();
    let pts = monte_carlo_curves(&exp, &alphas, 100, 400).map_err(|e| e.to_string())?;
    let mut msgs = Vec::new();
    let mut pass = true;
    for a in [0.1, 0.2, 0.5] {
        let o = asymptotic_power_oracle(&pool, 0.0, a).map_err(|e| e.to_string())?;
        let p = pts.iter().find(|p| (p.alpha - a).abs() < 1e-12).expect("grid point");
        let diff = (p.power_mean - o.asymptotic_power).abs();
        pass &= diff <= 0.03;
        msgs.push(format!("a={a}: {:.4} vs {:.4}", p.power_mean, o.asymptotic_power));
    }
    let top: Vec<f64> = pts[pts.len() - 3..].iter().map(|p| p.fdr_mean).collect();
    let spread =
        top.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - top.iter().cloned().fold(f64::INFINITY, f64::min);
    pass &= spread <= 0.01;
    let line = format!("power vs oracle {}; FDR plateau spread {spread:.4}", msgs.join(", "));
    check(pass, line.clone(), line)
}

fn finite_sample_bounds() -> Outcome {
    let eps = dkw_epsilon(0.05, 500);
    let expect = (160f64.ln() / 1000.0).sqrt();
    if (eps - expect).abs() > 1e-12 || format!("{eps:.4}") != "0.0712" {
        return Err(format!("epsilon {eps} != {expect}"));
    }
    let pool = gen_scores(&GAUSSIAN, 1_000_000, 5).map_err(|e| e.to_string())?;
    let exp = ScoreExperiment {
        model: GAUSSIAN,
        n_cal: 500,
        m: 500,
        method: Method::Conformal,
    };
    let alphas = [0.1, 0.2, 0.5];
    let bounds: Vec<_> = alphas
        .iter()
        .map(|&a| dkw_power_bounds(&pool, 500, 500, 0.0, a, 0.05))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut covered = [0usize; 3];
    for r in 0..200u64 {
        let res = exp.run(5000 + r, &alphas).map_err(|e| e.to_string())?;
        for i in 0..3 {
            if bounds[i].lower <= res[i].power && res[i].power <= bounds[i].upper {
                covered[i] += 1;
            }
        }
    }
    let line = format!(
        "epsilon_m = {eps:.4}; coverage over 200 runs at alpha 0.1/0.2/0.5: {}/{}/{}",
        covered[0], covered[1], covered[2]
    );
    check(covered.iter().all(|&c| c >= 190), line.clone(), line)
}

fn fdp(selected: &[usize], truth: &[f64]) -> f64 {
    realized_metrics(selected, truth, 0.0).fdp
}

fn baseline_failure() -> Outcome {
    let alpha = 0.1;
    let runs = 200;
    let mut base = Vec::new();
    let mut conf = Vec::new();
    for r in 0..runs as u64 {
        let reference = gen_score_dataset(&GAUSSIAN, 1000, Some(0.3), 2 * r + 10_000).map_err(|e| e.to_string())?;
        let test = gen_score_dataset(&GAUSSIAN, 500, Some(0.3), 2 * r + 10_001)
            .and_then(|d| d.with_role(Role::Test))
            .map_err(|e| e.to_string())?;
        let truth: Vec<f64> = test.records().iter().map(|u| u.alignment.unwrap()).collect();
        let q: Vec<f64> = test.records().iter().map(|u| u.self_eval.unwrap()).collect();
        base.push(fdp(&baseline_select(&q, alpha), &truth));
        let cfg = PipelineConfig {
            alpha,
            seed: r,
            ..PipelineConfig::default()
        };
        let report = run_pipeline(&reference, &test, &cfg).map_err(|e| e.to_string())?;
        conf.push(fdp(&report.selected_indices(), &truth));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let se = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt() / (v.len() as f64).sqrt()
    };
    let (b, c) = (mean(&base), mean(&conf));
    let line = format!(
        "baseline mean FDP {b:.4}, conformal mean FDP {c:.4} (SE {:.4}) at alpha 0.1",
        se(&conf)
    );
    check(b >= alpha + 0.05 && c <= alpha + 2.0 * se(&conf), line.clone(), line)
}

fn block_ones(blocks: usize, size: usize) -> SimilarityMatrix {
    let m = blocks * size;
    let w = (0..m * m).map(|i| f64::from(i / m / size == i % m / size)).collect();
    SimilarityMatrix::new(m, w).unwrap()
}

fn feature_identities() -> Outcome {
    let mut errs = Vec::new();
    let mut near = |name: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol {
            errs.push(format!("{name}: {got} vs {want}"));
        }
    };
    for m in 2..=6 {
        near("eigv ones", eigv_feature(&block_ones(1, m)), 1.0, 1e-9);
        near("eigv identity", eigv_feature(&block_ones(m, 1)), m as f64, 1e-9);
    }
    for b in 1..=3 {
        near("eigv blocks", eigv_feature(&block_ones(b, 3)), b as f64, 1e-9);
    }
    let t = TokenSequence::tokenize;
    near(
        "rouge identical",
        rouge_l(&t("the cat sat"), &t("the cat sat")),
        1.0,
        1e-12,
    );
    near(
        "rouge 2/3",
        rouge_l(&t("the cat sat"), &t("the cat ran")),
        2.0 / 3.0,
        1e-12,
    );
    near("rouge disjoint", rouge_l(&t("a b"), &t("c d")), 0.0, 1e-12);
    near("rouge empty", rouge_l(&t(""), &t("c d")), 0.0, 1e-12);
    near(
        "semantic entropy {2,1}",
        semantic_entropy(&[vec![0, 1], vec![2]], 3),
        0.636514168294813,
        1e-9,
    );
    let n = errs.len();
    check(
        n == 0,
        "eigv, rouge-L and semantic entropy identities hold".into(),
        errs.join("; "),
    )
}

fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let y = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
    (x, y)
}

fn predictor_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_rel: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(5..60);
        let d = rng.random_range(1..6);
        let (x, y) = random_problem(&mut rng, n, d);
        let lambda = rng.random_range(0.0..0.5);
        let theta: Vec<f64> = (0..=d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = logistic_gradient(&theta, &x, &y, lambda);
        let h = 1e-6;
        let fd: Vec<f64> = (0..=d)
            .map(|k| {
                let (mut tp, mut tm) = (theta.clone(), theta.clone());
                tp[k] += h;
                tm[k] -= h;
                (logistic_objective(&tp, &x, &y, lambda) - logistic_objective(&tm, &x, &y, lambda)) / (2.0 * h)
            })
            .collect();
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        worst_rel = worst_rel.max(diff / norm);
    }

    let model = FeatureModel {
        w: vec![1.0, -2.0],
        noise_sd: 1e-9,
        intercept: 0.0,
    };
    let train = gen_feature_dataset(&model, 300, 9).map_err(|e| e.to_string())?;
    // enforce a margin so the classes are strictly separable
    let margin: Vec<UnitRecord> = train
        .records()
        .iter()
        .filter(|r| (r.features[0] - 2.0 * r.features[1]).abs() > 0.2)
        .cloned()
        .collect();
    let train = Dataset::new(train.schema().to_vec(), margin, Role::Reference).map_err(|e| e.to_string())?;
    let g = fit_logistic(&train, &TrainConfig::default()).map_err(|e| e.to_string())?;
    let correct = train
        .records()
        .iter()
        .filter(|r| (g.predict_row(&r.features).unwrap() > 0.5) == (r.alignment == Some(1.0)))
        .count();
    let accuracy = correct as f64 / train.len() as f64;

    let mut monotone = true;
    for seed in 0..10 {
        let (x, y) = random_problem(&mut ChaCha8Rng::seed_from_u64(seed), 80, 3);
        let records = x
            .into_iter()
            .zip(y)
            .enumerate()
            .map(|(i, (row, a))| UnitRecord::new(format!("u{i}"), row).with_alignment(a))
            .collect();
        let ds = Dataset::new(vec!["x".into(), "y".into(), "z".into()], records, Role::Reference).unwrap();
        let fit = fit_logistic_traced(&ds, &TrainConfig::default()).map_err(|e| e.to_string())?;
        monotone &= fit.objective_trace.windows(2).all(|w| w[1] < w[0]);
    }
    let line = format!(
        "max gradient relative error {worst_rel:.2e} over 50 instances; separable accuracy {accuracy}; monotone objective: {monotone}"
    );
    check(worst_rel < 1e-4 && accuracy == 1.0 && monotone, line.clone(), line)
}

fn random_bundle(rng: &mut ChaCha8Rng) -> GenerationBundle {
    let m = rng.random_range(2..=8);
    let vocab = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let gens = (0..m)
        .map(|_| {
            let len = rng.random_range(1..6);
            TokenSequence::from_tokens((0..len).map(|_| vocab[rng.random_range(0..vocab.len())]))
        })
        .collect();
    let mat = |rng: &mut ChaCha8Rng| ProbMatrix::from_flat(m, (0..m * m).map(|_| rng.random()).collect()).unwrap();
    let p = mat(rng);
    let q = mat(rng);
    let mut b = GenerationBundle::new("u", gens)
        .with_entail(p)
        .unwrap()
        .with_contra(q)
        .unwrap();
    b.self_eval = Some(rng.random());
    b
}

fn permuted(b: &GenerationBundle, perm: &[usize]) -> GenerationBundle {
    let m = b.m();
    let remap = |p: &ProbMatrix| {
        ProbMatrix::from_flat(m, (0..m * m).map(|i| p.get(perm[i / m], perm[i % m])).collect()).unwrap()
    };
    GenerationBundle {
        unit_id: b.unit_id.clone(),
        generations: perm.iter().map(|&i| b.generations[i].clone()).collect(),
        entail_prob: b.entail_prob.as_ref().map(remap),
        contra_prob: b.contra_prob.as_ref().map(remap),
        self_eval: b.self_eval,
    }
}

/// Ecc is undefined when the eigenvalue cutoff splits or touches the spectrum.
fn ecc_well_posed(b: &GenerationBundle, f: FeatureName, cutoff: f64) -> bool {
    let Some(kind) = f.similarity() else { return true };
    if !matches!(f, FeatureName::EccJ | FeatureName::EccE | FeatureName::EccC) {
        return true;
    }
    let s = laplacian_spectrum(&similarity_matrix(b, kind).unwrap());
    let k = s.values.iter().filter(|&&l| l <= cutoff).count().max(1);
    let on_cutoff = s.values.iter().any(|&l| (l - cutoff).abs() < 1e-6);
    !(on_cutoff || (k < s.values.len() && (s.values[k] - s.values[k - 1]).abs() < 1e-6))
}

fn invariance_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // rank invariance under strictly increasing transforms
    let mut rank_failures = 0;
    for inst in 0..50u64 {
        let n = rng.random_range(5..60);
        let m = rng.random_range(5..60);
        let cal_s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let cal_a: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let test: Vec<f64> = (0..m).map(|_| rng.random()).collect();
        let alpha = rng.random_range(0.05..0.6);
        let select = |cs: &[f64], ts: &[f64]| {
            let p = conformal_pvalues(&pairs(cs, &cal_a), ts, 0.0, inst).unwrap();
            bh_select(&p, alpha).0
        };
        let base = select(&cal_s, &test);
        for t in 0..20 {
            let a = rng.random_range(0.1..5.0);
            let b = rng.random_range(-3.0..3.0);
            let f = move |x: f64| -> f64 {
                match t % 5 {
                    0 => a * x + b,
                    1 => (a * x).exp() + b,
                    2 => x.powf(a) + b,
                    3 => (a * x + b).atan(),
                    _ => (x * a).ln_1p() * 3.0 + x.powi(3),
                }
            };
            let cs: Vec<f64> = cal_s.iter().map(|&x| f(x)).collect();
            let ts: Vec<f64> = test.iter().map(|&x| f(x)).collect();
            if select(&cs, &ts) != base {
                rank_failures += 1;
            }
        }
    }

    // permutation equivariance of every feature
    let params = FeatureParams::default();
    let (mut perm_failures, mut skipped, mut compared) = (0, 0, 0);
    for _ in 0..200 {
        let b = random_bundle(&mut rng);
        let mut perm: Vec<usize> = (0..b.m()).collect();
        perm.shuffle(&mut rng);
        let x = featurize_unit(&b, &FeatureName::ALL, &params).unwrap();
        let y = featurize_unit(&permuted(&b, &perm), &FeatureName::ALL, &params).unwrap();
        for ((f, u), (_, v)) in x.0.iter().zip(&y.0) {
            if !ecc_well_posed(&b, *f, params.ecc_eigen_cutoff) {
                skipped += 1;
                continue;
            }
            compared += 1;
            if (u - v).abs() > 1e-9 {
                perm_failures += 1;
            }
        }
    }

    // selection grows with alpha
    let mut monotone_failures = 0;
    for inst in 0..200u64 {
        let n = rng.random_range(1..50);
        let m = rng.random_range(1..50);
        let cal: Vec<CalibrationPair> = (0..n)
            .map(|_| CalibrationPair::new(rng.random(), f64::from(rng.random_bool(0.5))))
            .collect();
        let test: Vec<f64> = (0..m).map(|_| rng.random()).collect();
        let p = conformal_pvalues(&cal, &test, 0.0, inst).unwrap();
        let mut prev: Vec<usize> = Vec::new();
        for a in grid() {
            let s = bh_select(&p, a).0;
            if !prev.iter().all(|j| s.contains(j)) {
                monotone_failures += 1;
            }
            prev = s;
        }
    }
    let line = format!(
        "rank invariance failures {rank_failures}/1000; feature permutation failures {perm_failures}/{compared} \
         ({skipped} ill-posed ecc comparisons skipped); alpha-monotonicity failures {monotone_failures}"
    );
    check(
        rank_failures == 0 && perm_failures == 0 && monotone_failures == 0 && compared > 10 * skipped,
        line.clone(),
        line,
    )
}

fn cli_determinism() -> Outcome {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let (fa, fb) = (common::run_all(a.path()), common::run_all(b.path()));
    let differing: Vec<String> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| common::digest(x) != common::digest(y))
        .map(|(x, _)| x.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    check(
        differing.is_empty(),
        format!(
            "{} artifacts from all 7 commands hash-identical across two runs",
            fa.len()
        ),
        format!("artifacts differ: {}", differing.join(", ")),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("FDR control on the Gaussian score model", fdr_control),
        ("BH / threshold equivalence", bh_threshold_equivalence),
        ("p-value super-uniformity", super_uniformity),
        ("asymptotic power consistency", asymptotic_power_consistency),
        ("finite-sample power bounds", finite_sample_bounds),
        ("self-evaluation baseline failure", baseline_failure),
        ("feature identities", feature_identities),
        ("predictor numerics", predictor_numerics),
        ("invariance suite", invariance_suite),
        ("CLI determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS criterion {:>2} {name}: {msg} [{secs:.1}s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {msg} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
