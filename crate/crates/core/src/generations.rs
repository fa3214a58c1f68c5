//! Generations JSONL: one object per unit with its sampled generations and the
//! optional reference answer, label vectors, NLI matrices and self-evaluation.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    label_match_alignment, qa_alignment, LabelVector, TokenSequence, MIN_LABEL_MATCHES, QA_ROUGE_THRESHOLD,
};
use crate::data::{Dataset, Role, UnitRecord};
use crate::error::{Error, Result};
use crate::features::{featurize_unit, FeatureName, FeatureParams, GenerationBundle, ProbMatrix};

/// Probability matrix as either nested rows or a flat row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixInput {
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

impl MatrixInput {
    fn to_matrix(&self, m: usize) -> Result<ProbMatrix> {
        match self {
            MatrixInput::Rows(rows) => ProbMatrix::from_rows(rows),
            MatrixInput::Flat(flat) => ProbMatrix::from_flat(m, flat.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub unit_id: String,
    pub generations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entail_prob: Option<MatrixInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contra_prob: Option<MatrixInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_eval: Option<f64>,
}

impl GenerationRecord {
    pub fn bundle(&self) -> Result<GenerationBundle> {
        let m = self.generations.len();
        let mut b = GenerationBundle::from_texts(self.unit_id.clone(), &self.generations);
        b.self_eval = self.self_eval;
        if let Some(p) = &self.entail_prob {
            b = b.with_entail(p.to_matrix(m)?)?;
        }
        if let Some(q) = &self.contra_prob {
            b = b.with_contra(q.to_matrix(m)?)?;
        }
        Ok(b)
    }

    /// Ground-truth alignment of the first generation: rouge-L against the
    /// reference answer when present, else the label-match rule.
    pub fn alignment(&self) -> Result<Option<f64>> {
        if let Some(reference) = &self.reference {
            let Some(first) = self.generations.first() else {
                return Ok(Some(0.0));
            };
            let a = qa_alignment(
                &TokenSequence::tokenize(first),
                &TokenSequence::tokenize(reference),
                QA_ROUGE_THRESHOLD,
            )?;
            return Ok(Some(f64::from(a)));
        }
        match (&self.labels, &self.ref_labels) {
            (Some(l), Some(r)) => {
                let a = label_match_alignment(&LabelVector::new(l)?, &LabelVector::new(r)?, MIN_LABEL_MATCHES)?;
                Ok(Some(f64::from(a)))
            }
            (None, None) => Ok(None),
            _ => Err(Error::Schema(format!(
                "unit `{}` has only one of labels / ref_labels",
                self.unit_id
            ))),
        }
    }
}

/// Parses JSONL, skipping blank lines. Errors carry the 1-based line number.
pub fn read_generations<R: Read>(reader: R) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<generations jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            row: i + 1,
            column: "json".into(),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_generations(path: impl AsRef<Path>) -> Result<Vec<GenerationRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_generations(f)
}

/// Featurizes every unit into a records dataset. With `requested = None` the
/// features are those available for every unit. The dataset has the
/// reference role when every unit carries ground truth, else the test role.
pub fn featurize_records(
    records: &[GenerationRecord],
    requested: Option<&[FeatureName]>,
    params: &FeatureParams,
) -> Result<Dataset> {
    let bundles: Vec<GenerationBundle> = records.iter().map(GenerationRecord::bundle).collect::<Result<_>>()?;
    let names: Vec<FeatureName> = match requested {
        Some(r) => r.to_vec(),
        None => FeatureName::ALL
            .into_iter()
            .filter(|f| bundles.iter().all(|b| b.available_features().contains(f)))
            .collect(),
    };
    let rows: Vec<UnitRecord> = records
        .par_iter()
        .zip(bundles.par_iter())
        .map(|(rec, b)| {
            let fv = featurize_unit(b, &names, params)?;
            let mut r = UnitRecord::new(rec.unit_id.clone(), fv.values());
            r.alignment = rec.alignment()?;
            r.self_eval = rec.self_eval;
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let role = if !rows.is_empty() && rows.iter().all(|r| r.alignment.is_some()) {
        Role::Reference
    } else {
        Role::Test
    };
    Dataset::new(names.iter().map(|f| f.as_str().to_string()).collect(), rows, role)
}

#[cfg(test)]
mod tests {
    use super::*;

    const JSONL: &str = r#"{"unit_id": "a", "generations": ["Paris", "paris!"], "reference": "Paris", "self_eval": 0.9}

{"unit_id": "b", "generations": ["Lyon", "Nice"], "reference": "Paris", "self_eval": 0.4, "entail_prob": [1, 0.2, 0.1, 1]}
"#;

    #[test]
    fn featurize_identical_generations() {
        let recs = read_generations(JSONL.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        let ds = featurize_records(&recs, None, &FeatureParams::default()).unwrap();
        assert_eq!(ds.role(), Role::Reference);
        let lex = ds.feature_index("lexical_sim").unwrap();
        let deg = ds.feature_index("deg_j").unwrap();
        assert!(ds.feature_index("se").is_none());
        let a = &ds.records()[0];
        assert_eq!(a.features[lex], 1.0);
        assert!(a.features[deg].abs() < 1e-12);
        assert_eq!(a.alignment, Some(1.0));
        assert_eq!(ds.records()[1].alignment, Some(0.0));
        assert_eq!(a.self_eval, Some(0.9));
    }

    #[test]
    fn requested_feature_missing() {
        let recs = read_generations(JSONL.as_bytes()).unwrap();
        let err = featurize_records(&recs, Some(&[FeatureName::Se]), &FeatureParams::default()).unwrap_err();
        assert!(matches!(err, Error::FeatureUnavailable(f) if f == "se"));
    }

    #[test]
    fn label_alignment_and_test_role() {
        let line = format!(
            r#"{{"unit_id": "x", "generations": ["a b", "a c"], "labels": {:?}, "ref_labels": {:?}}}"#,
            vec![1u8; 14],
            [vec![0u8; 2], vec![1u8; 12]].concat()
        );
        let recs = read_generations(line.as_bytes()).unwrap();
        assert_eq!(recs[0].alignment().unwrap(), Some(1.0));
        let ds = featurize_records(&recs, Some(&[FeatureName::EigvJ]), &FeatureParams::default()).unwrap();
        assert_eq!(ds.role(), Role::Reference);

        let plain = read_generations(r#"{"unit_id": "y", "generations": ["a", "b"]}"#.as_bytes()).unwrap();
        let ds = featurize_records(&plain, None, &FeatureParams::default()).unwrap();
        assert_eq!(ds.role(), Role::Test);
    }

    #[test]
    fn malformed_line_reports_position() {
        let err =
            read_generations("{\"unit_id\": \"a\", \"generations\": [\"x\"]}\nnot json\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Malformed { row: 2, .. }));
    }

    #[test]
    fn nested_and_flat_matrices_agree() {
        let flat = MatrixInput::Flat(vec![1.0, 0.3, 0.6, 1.0]);
        let rows = MatrixInput::Rows(vec![vec![1.0, 0.3], vec![0.6, 1.0]]);
        assert_eq!(flat.to_matrix(2).unwrap(), rows.to_matrix(2).unwrap());
    }
}
