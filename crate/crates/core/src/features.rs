//! Uncertainty and confidence features computed from a unit's sampled generations.
//!
//! Similarity graphs come in three flavours: Jaccard token overlap (J), NLI
//! entailment (E) and one minus NLI contradiction (C). Each graph yields three
//! spectral features from its normalized Laplacian `L = I - D^-1/2 W D^-1/2`:
//!
//! * `eigv`: `sum_k max(0, 1 - lambda_k)`, a continuous count of semantic clusters;
//! * `deg`: one minus the mean pairwise similarity;
//! * `ecc`: spread of the generations in the embedding spanned by the
//!   eigenvectors of the smallest eigenvalues.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{rouge_l, TokenSequence};
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;

const SYMMETRY_TOL: f64 = 1e-9;

/// Tunables for the clustering and eccentricity features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    /// Minimum entailment probability, in both directions, for two generations
    /// to share a semantic set.
    pub entail_threshold: f64,
    /// Eigenvalues at or below this cutoff contribute an embedding dimension to `ecc`.
    pub ecc_eigen_cutoff: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            entail_threshold: 0.5,
            ecc_eigen_cutoff: 0.5,
        }
    }
}

/// Source of pairwise similarity between generations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Similarity {
    Jaccard,
    Entail,
    Contra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureName {
    SelfEval,
    LexicalSim,
    NumSets,
    Se,
    EigvJ,
    EigvE,
    EigvC,
    DegJ,
    DegE,
    DegC,
    EccJ,
    EccE,
    EccC,
}

impl FeatureName {
    pub const ALL: [FeatureName; 13] = [
        FeatureName::SelfEval,
        FeatureName::LexicalSim,
        FeatureName::NumSets,
        FeatureName::Se,
        FeatureName::EigvJ,
        FeatureName::EigvE,
        FeatureName::EigvC,
        FeatureName::DegJ,
        FeatureName::DegE,
        FeatureName::DegC,
        FeatureName::EccJ,
        FeatureName::EccE,
        FeatureName::EccC,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureName::SelfEval => "self_eval",
            FeatureName::LexicalSim => "lexical_sim",
            FeatureName::NumSets => "num_sets",
            FeatureName::Se => "se",
            FeatureName::EigvJ => "eigv_j",
            FeatureName::EigvE => "eigv_e",
            FeatureName::EigvC => "eigv_c",
            FeatureName::DegJ => "deg_j",
            FeatureName::DegE => "deg_e",
            FeatureName::DegC => "deg_c",
            FeatureName::EccJ => "ecc_j",
            FeatureName::EccE => "ecc_e",
            FeatureName::EccC => "ecc_c",
        }
    }

    /// Similarity graph behind a spectral feature; `None` for the others.
    pub fn similarity(self) -> Option<Similarity> {
        use FeatureName::*;
        match self {
            EigvJ | DegJ | EccJ => Some(Similarity::Jaccard),
            EigvE | DegE | EccE => Some(Similarity::Entail),
            EigvC | DegC | EccC => Some(Similarity::Contra),
            _ => None,
        }
    }
}

impl fmt::Display for FeatureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureName::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown feature `{s}`")))
    }
}

/// Row-major square probability matrix, validated to lie in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    m: usize,
    p: Vec<f64>,
}

impl ProbMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let mut p = Vec::with_capacity(m * m);
        for row in rows {
            if row.len() != m {
                return Err(Error::LengthMismatch {
                    expected: m,
                    actual: row.len(),
                });
            }
            p.extend_from_slice(row);
        }
        Self::from_flat(m, p)
    }

    pub fn from_flat(m: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != m * m {
            return Err(Error::LengthMismatch {
                expected: m * m,
                actual: p.len(),
            });
        }
        if let Some(bad) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Parameter(format!("probability {bad} outside [0, 1]")));
        }
        Ok(Self { m, p })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.p[j * self.m + k]
    }
}

/// A unit's sampled generations plus the optional NLI and self-evaluation sources.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationBundle {
    pub unit_id: String,
    pub generations: Vec<TokenSequence>,
    /// Entailment probability, row = premise, column = hypothesis.
    pub entail_prob: Option<ProbMatrix>,
    pub contra_prob: Option<ProbMatrix>,
    pub self_eval: Option<f64>,
}

impl GenerationBundle {
    pub fn new(unit_id: impl Into<String>, generations: Vec<TokenSequence>) -> Self {
        Self {
            unit_id: unit_id.into(),
            generations,
            entail_prob: None,
            contra_prob: None,
            self_eval: None,
        }
    }

    pub fn from_texts<S: AsRef<str>>(unit_id: impl Into<String>, texts: &[S]) -> Self {
        Self::new(
            unit_id,
            texts.iter().map(|t| TokenSequence::tokenize(t.as_ref())).collect(),
        )
    }

    pub fn with_entail(mut self, p: ProbMatrix) -> Result<Self> {
        self.check_dim(&p)?;
        self.entail_prob = Some(p);
        Ok(self)
    }

    pub fn with_contra(mut self, q: ProbMatrix) -> Result<Self> {
        self.check_dim(&q)?;
        self.contra_prob = Some(q);
        Ok(self)
    }

    fn check_dim(&self, p: &ProbMatrix) -> Result<()> {
        if p.dim() != self.generations.len() {
            return Err(Error::LengthMismatch {
                expected: self.generations.len(),
                actual: p.dim(),
            });
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.generations.len()
    }

    /// Features whose source data this bundle carries.
    pub fn available_features(&self) -> Vec<FeatureName> {
        FeatureName::ALL
            .into_iter()
            .filter(|&f| self.missing_source(f).is_none())
            .collect()
    }

    fn missing_source(&self, f: FeatureName) -> Option<&'static str> {
        match f {
            FeatureName::SelfEval => self.self_eval.is_none().then_some("self_eval"),
            FeatureName::NumSets | FeatureName::Se => self.entail_prob.is_none().then_some("entail_prob"),
            _ => match f.similarity() {
                Some(Similarity::Entail) if self.entail_prob.is_none() => Some("entail_prob"),
                Some(Similarity::Contra) if self.contra_prob.is_none() => Some("contra_prob"),
                _ if self.m() < 2 => Some("at least two generations"),
                _ => None,
            },
        }
    }
}

/// Symmetric similarity matrix with unit diagonal and entries in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    m: usize,
    w: Vec<f64>,
}

impl SimilarityMatrix {
    /// Validates a row-major `m x m` buffer.
    pub fn new(m: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != m * m {
            return Err(Error::LengthMismatch {
                expected: m * m,
                actual: w.len(),
            });
        }
        let mut asym: f64 = 0.0;
        for j in 0..m {
            if w[j * m + j] != 1.0 {
                return Err(Error::Parameter(format!(
                    "diagonal entry {j} is {} not 1",
                    w[j * m + j]
                )));
            }
            for k in 0..m {
                let x = w[j * m + k];
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::Parameter(format!("similarity {x} outside [0, 1]")));
                }
                asym = asym.max((x - w[k * m + j]).abs());
            }
        }
        if asym > SYMMETRY_TOL {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(Self { m, w })
    }

    fn from_pairs(m: usize, mut pair: impl FnMut(usize, usize) -> f64) -> Self {
        let mut w = vec![1.0; m * m];
        for j in 0..m {
            for k in j + 1..m {
                let x = pair(j, k).clamp(0.0, 1.0);
                w[j * m + k] = x;
                w[k * m + j] = x;
            }
        }
        Self { m, w }
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.w[j * self.m + k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }
}

fn require_pairs(bundle: &GenerationBundle) -> Result<()> {
    if bundle.m() < 2 {
        return Err(Error::Parameter(format!(
            "unit `{}` needs at least two generations, has {}",
            bundle.unit_id,
            bundle.m()
        )));
    }
    Ok(())
}

/// Jaccard similarity of the distinct-token sets of each pair of generations.
pub fn jaccard_matrix(bundle: &GenerationBundle) -> Result<SimilarityMatrix> {
    require_pairs(bundle)?;
    let sets: Vec<HashSet<&str>> = bundle
        .generations
        .iter()
        .map(|g| g.tokens().iter().map(String::as_str).collect())
        .collect();
    Ok(SimilarityMatrix::from_pairs(bundle.m(), |j, k| {
        let union = sets[j].union(&sets[k]).count();
        if union == 0 {
            1.0
        } else {
            sets[j].intersection(&sets[k]).count() as f64 / union as f64
        }
    }))
}

/// Symmetrized NLI similarity: mean entailment, or one minus mean contradiction.
pub fn nli_similarity_matrix(bundle: &GenerationBundle, kind: Similarity) -> Result<SimilarityMatrix> {
    match kind {
        Similarity::Entail => {
            let p = bundle
                .entail_prob
                .as_ref()
                .ok_or_else(|| Error::FeatureUnavailable("entailment similarity".into()))?;
            Ok(SimilarityMatrix::from_pairs(p.dim(), |j, k| {
                (p.get(j, k) + p.get(k, j)) / 2.0
            }))
        }
        Similarity::Contra => {
            let q = bundle
                .contra_prob
                .as_ref()
                .ok_or_else(|| Error::FeatureUnavailable("contradiction similarity".into()))?;
            Ok(SimilarityMatrix::from_pairs(q.dim(), |j, k| {
                1.0 - (q.get(j, k) + q.get(k, j)) / 2.0
            }))
        }
        Similarity::Jaccard => Err(Error::Parameter("Jaccard similarity is not NLI-based".into())),
    }
}

/// Similarity matrix of the requested kind.
pub fn similarity_matrix(bundle: &GenerationBundle, kind: Similarity) -> Result<SimilarityMatrix> {
    match kind {
        Similarity::Jaccard => jaccard_matrix(bundle),
        _ => nli_similarity_matrix(bundle, kind),
    }
}

/// Mean rouge-L over all unordered pairs of generations.
pub fn lexical_sim(bundle: &GenerationBundle) -> Result<f64> {
    require_pairs(bundle)?;
    let m = bundle.m();
    let mut total = 0.0;
    for j in 0..m {
        for k in j + 1..m {
            total += rouge_l(&bundle.generations[j], &bundle.generations[k]);
        }
    }
    Ok(total / (m * (m - 1) / 2) as f64)
}

/// Groups generations linked by bidirectional entailment (connected components).
/// Clusters are ordered by their smallest member; members ascend.
pub fn semantic_clusters(bundle: &GenerationBundle, entail_threshold: f64) -> Result<Vec<Vec<usize>>> {
    let p = bundle
        .entail_prob
        .as_ref()
        .ok_or_else(|| Error::FeatureUnavailable("semantic clusters".into()))?;
    let m = p.dim();
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for j in 0..m {
        for k in j + 1..m {
            if p.get(j, k) >= entail_threshold && p.get(k, j) >= entail_threshold {
                let (a, b) = (find(&mut parent, j), find(&mut parent, k));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; m];
    for j in 0..m {
        let root = find(&mut parent, j);
        if slot[root] == usize::MAX {
            slot[root] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[slot[root]].push(j);
    }
    Ok(clusters)
}

pub fn num_sets(partition: &[Vec<usize>]) -> usize {
    partition.len()
}

/// Entropy (nats) of the cluster-size distribution.
pub fn semantic_entropy(partition: &[Vec<usize>], m: usize) -> f64 {
    partition
        .iter()
        .map(|c| c.len() as f64 / m as f64)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// Spectrum of the normalized graph Laplacian, eigenvalues clamped to [0, 2].
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianSpectrum {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

/// Normalized Laplacian `I - D^-1/2 W D^-1/2`, row-major.
pub fn normalized_laplacian(w: &SimilarityMatrix) -> Vec<f64> {
    let m = w.dim();
    let inv_sqrt_deg: Vec<f64> = (0..m)
        .map(|j| 1.0 / (0..m).map(|k| w.get(j, k)).sum::<f64>().sqrt())
        .collect();
    let mut l = vec![0.0; m * m];
    for j in 0..m {
        for k in 0..m {
            let delta = if j == k { 1.0 } else { 0.0 };
            l[j * m + k] = delta - w.get(j, k) * inv_sqrt_deg[j] * inv_sqrt_deg[k];
        }
    }
    l
}

pub fn laplacian_spectrum(w: &SimilarityMatrix) -> LaplacianSpectrum {
    let m = w.dim();
    let eig = symmetric_eigen(&normalized_laplacian(w), m);
    LaplacianSpectrum {
        values: eig.values.into_iter().map(|x| x.clamp(0.0, 2.0)).collect(),
        vectors: eig.vectors,
    }
}

pub fn eigv_feature(w: &SimilarityMatrix) -> f64 {
    laplacian_spectrum(w).values.iter().map(|&l| (1.0 - l).max(0.0)).sum()
}

pub fn deg_feature(w: &SimilarityMatrix) -> f64 {
    let m = w.dim() as f64;
    1.0 - w.as_slice().iter().sum::<f64>() / (m * m)
}

/// Norm of the centered embeddings built from the eigenvectors whose
/// eigenvalue is at most `eigen_cutoff` (at least one).
pub fn ecc_feature(w: &SimilarityMatrix, eigen_cutoff: f64) -> f64 {
    let spectrum = laplacian_spectrum(w);
    let m = w.dim();
    let k = spectrum.values.iter().filter(|&&l| l <= eigen_cutoff).count().max(1);
    let mut total = 0.0;
    for u in spectrum.vectors.iter().take(k) {
        let mean = u.iter().sum::<f64>() / m as f64;
        total += u.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    }
    total.sqrt()
}

/// Named feature values in request order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector(pub Vec<(FeatureName, f64)>);

impl FeatureVector {
    pub fn get(&self, name: FeatureName) -> Option<f64> {
        self.0.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.iter().map(|&(_, v)| v).collect()
    }
}

/// Computes the requested features for one unit.
pub fn featurize_unit(
    bundle: &GenerationBundle,
    requested: &[FeatureName],
    params: &FeatureParams,
) -> Result<FeatureVector> {
    if let Some(&missing) = requested.iter().find(|&&f| bundle.missing_source(f).is_some()) {
        return Err(Error::FeatureUnavailable(missing.to_string()));
    }

    let mut graphs: Vec<(Similarity, SimilarityMatrix)> = Vec::new();
    let mut clusters: Option<Vec<Vec<usize>>> = None;
    let mut out = Vec::with_capacity(requested.len());
    for &f in requested {
        let value = match f {
            FeatureName::SelfEval => bundle.self_eval.expect("checked above"),
            FeatureName::LexicalSim => lexical_sim(bundle)?,
            FeatureName::NumSets | FeatureName::Se => {
                if clusters.is_none() {
                    clusters = Some(semantic_clusters(bundle, params.entail_threshold)?);
                }
                let c = clusters.as_deref().expect("just computed");
                if f == FeatureName::NumSets {
                    num_sets(c) as f64
                } else {
                    semantic_entropy(c, bundle.m())
                }
            }
            _ => {
                let kind = f.similarity().expect("graph feature");
                let w = match graphs.iter().find(|(k, _)| *k == kind) {
                    Some((_, w)) => w,
                    None => {
                        graphs.push((kind, similarity_matrix(bundle, kind)?));
                        &graphs.last().expect("just pushed").1
                    }
                };
                match f {
                    FeatureName::EigvJ | FeatureName::EigvE | FeatureName::EigvC => eigv_feature(w),
                    FeatureName::DegJ | FeatureName::DegE | FeatureName::DegC => deg_feature(w),
                    _ => ecc_feature(w, params.ecc_eigen_cutoff),
                }
            }
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("feature {f} of unit `{}`", bundle.unit_id)));
        }
        out.push((f, value));
    }
    Ok(FeatureVector(out))
}
