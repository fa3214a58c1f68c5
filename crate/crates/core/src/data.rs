//! Record types, the dataset container, CSV I/O and the three-way reference split.
//!
//! Records CSV layout: a header row with a required `unit_id` column, optional
//! `a` (true alignment) and `self_eval` columns, and one `feat_<name>` column per
//! feature. Empty cells in optional columns mean "absent", never zero.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column-name prefix marking a feature column in records CSV files.
pub const FEATURE_PREFIX: &str = "feat_";

/// One unit: identifier, optional true alignment, optional self-evaluation
/// likelihood, feature vector and optional predicted alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit_id: String,
    pub alignment: Option<f64>,
    pub self_eval: Option<f64>,
    pub features: Vec<f64>,
    pub predicted: Option<f64>,
}

impl UnitRecord {
    pub fn new(unit_id: impl Into<String>, features: Vec<f64>) -> Self {
        Self {
            unit_id: unit_id.into(),
            alignment: None,
            self_eval: None,
            features,
            predicted: None,
        }
    }

    pub fn with_alignment(mut self, a: f64) -> Self {
        self.alignment = Some(a);
        self
    }

    pub fn with_self_eval(mut self, q: f64) -> Self {
        self.self_eval = Some(q);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Labelled units: alignment is known for every record.
    Reference,
    /// Units to select from: alignment may be absent.
    Test,
}

/// An ordered feature schema plus the records that follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Vec<String>,
    records: Vec<UnitRecord>,
    role: Role,
}

impl Dataset {
    /// Builds a dataset, checking unique ids, feature widths and (for reference
    /// sets) that every record carries an alignment score.
    pub fn new(schema: Vec<String>, records: Vec<UnitRecord>, role: Role) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if !seen.insert(r.unit_id.as_str()) {
                return Err(Error::DuplicateUnit(r.unit_id.clone()));
            }
            if r.features.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "record {} (`{}`) has {} features, schema declares {}",
                    i,
                    r.unit_id,
                    r.features.len(),
                    schema.len()
                )));
            }
            if role == Role::Reference && r.alignment.is_none() {
                return Err(Error::Schema(format!(
                    "reference record `{}` has no alignment score",
                    r.unit_id
                )));
            }
        }
        Ok(Self { schema, records, role })
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn records(&self) -> &[UnitRecord] {
        &self.records
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|s| s == name)
    }

    /// Alignment scores in record order; `None` where absent.
    pub fn alignments(&self) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.alignment).collect()
    }

    /// Restricts the dataset to the named feature columns, in the given order.
    pub fn select_features(&self, names: &[String]) -> Result<Dataset> {
        let idx = names
            .iter()
            .map(|n| {
                self.feature_index(n)
                    .ok_or_else(|| Error::Schema(format!("feature `{n}` not in dataset schema")))
            })
            .collect::<Result<Vec<_>>>()?;
        let records = self
            .records
            .iter()
            .map(|r| UnitRecord {
                features: idx.iter().map(|&i| r.features[i]).collect(),
                ..r.clone()
            })
            .collect();
        Ok(Dataset {
            schema: names.to_vec(),
            records,
            role: self.role,
        })
    }

    /// Same records under a different role; re-validates the role invariants.
    pub fn with_role(self, role: Role) -> Result<Dataset> {
        Dataset::new(self.schema, self.records, role)
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            role: self.role,
        }
    }

    /// Writes the records CSV. `a` and `self_eval` columns are emitted when any
    /// record has them; absent values become empty cells.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let has_a = self.records.iter().any(|r| r.alignment.is_some());
        let has_q = self.records.iter().any(|r| r.self_eval.is_some());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["unit_id".to_string()];
        if has_a {
            header.push("a".into());
        }
        if has_q {
            header.push("self_eval".into());
        }
        header.extend(self.schema.iter().map(|s| format!("{FEATURE_PREFIX}{s}")));
        w.write_record(&header)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let mut row = vec![r.unit_id.clone()];
            if has_a {
                row.push(opt(r.alignment));
            }
            if has_q {
                row.push(opt(r.self_eval));
            }
            row.extend(r.features.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Reads a records CSV from any reader. `schema` names the expected feature
/// columns (without the `feat_` prefix); `None` takes every `feat_` column in
/// header order.
pub fn read_dataset<R: Read>(reader: R, schema: Option<&[String]>, role: Role) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);

    let id_col = col("unit_id").ok_or_else(|| Error::Schema("missing `unit_id` column".into()))?;
    let a_col = col("a");
    let q_col = col("self_eval");
    if role == Role::Reference && a_col.is_none() {
        return Err(Error::Schema("reference data requires an `a` column".into()));
    }

    let names: Vec<String> = match schema {
        Some(s) => s.to_vec(),
        None => header
            .iter()
            .filter_map(|h| h.strip_prefix(FEATURE_PREFIX).map(str::to_string))
            .collect(),
    };
    let feat_cols = names
        .iter()
        .map(|n| {
            col(&format!("{FEATURE_PREFIX}{n}"))
                .ok_or_else(|| Error::Schema(format!("missing feature column `{FEATURE_PREFIX}{n}`")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| Error::Malformed {
            row: line,
            column: String::new(),
            message: e.to_string(),
        })?;
        let cell = |c: usize| row.get(c).unwrap_or("");
        let parse = |c: usize, name: &str| -> Result<f64> {
            let s = cell(c);
            let v: f64 = s.parse().map_err(|_| Error::Malformed {
                row: line,
                column: name.to_string(),
                message: format!("`{s}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Malformed {
                    row: line,
                    column: name.to_string(),
                    message: format!("`{s}` is not finite"),
                });
            }
            Ok(v)
        };
        let optional = |c: Option<usize>, name: &str| -> Result<Option<f64>> {
            match c {
                Some(c) if !cell(c).is_empty() => parse(c, name).map(Some),
                _ => Ok(None),
            }
        };

        let unit_id = cell(id_col).to_string();
        if unit_id.is_empty() {
            return Err(Error::Malformed {
                row: line,
                column: "unit_id".into(),
                message: "empty identifier".into(),
            });
        }
        let alignment = optional(a_col, "a")?;
        if role == Role::Reference && alignment.is_none() {
            return Err(Error::Malformed {
                row: line,
                column: "a".into(),
                message: "reference rows need an alignment score".into(),
            });
        }
        let features = feat_cols
            .iter()
            .zip(&names)
            .map(|(&c, n)| parse(c, &format!("{FEATURE_PREFIX}{n}")))
            .collect::<Result<Vec<_>>>()?;
        records.push(UnitRecord {
            unit_id,
            alignment,
            self_eval: optional(q_col, "self_eval")?,
            features,
            predicted: None,
        });
    }
    Dataset::new(names, records, role)
}

/// Loads a records CSV from disk. See [`read_dataset`].
pub fn load_dataset(path: impl AsRef<Path>, schema: Option<&[String]>, role: Role) -> Result<Dataset> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(std::io::BufReader::new(f), schema, role)
}

/// Tuning, predictor-training and calibration parts of a reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub tuning: Dataset,
    pub training: Dataset,
    pub calibration: Dataset,
    pub seed: u64,
}

fn floor_fraction(gamma: f64, n: usize) -> usize {
    // absorb representation error such as 0.29 * 100 = 28.999999999999996
    (gamma * n as f64 + 1e-9).floor() as usize
}

/// Seeded uniform split without replacement into parts of sizes
/// `floor(gamma1 n)`, `floor(gamma2 n)` and the remainder.
pub fn split_dataset(dataset: &Dataset, gamma1: f64, gamma2: f64, seed: u64) -> Result<SplitResult> {
    if dataset.role() != Role::Reference {
        return Err(Error::Parameter("only reference datasets can be split".into()));
    }
    for (name, g) in [("gamma1", gamma1), ("gamma2", gamma2)] {
        if !(0.0..1.0).contains(&g) {
            return Err(Error::Parameter(format!("{name} = {g} must lie in [0, 1)")));
        }
    }
    if gamma1 + gamma2 >= 1.0 {
        return Err(Error::Parameter(format!(
            "gamma1 + gamma2 = {} must be below 1",
            gamma1 + gamma2
        )));
    }
    let n = dataset.len();
    let n_tune = floor_fraction(gamma1, n);
    let n_train = floor_fraction(gamma2, n);
    if n_tune + n_train >= n {
        return Err(Error::Parameter(format!(
            "split of {n} units leaves an empty calibration part"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    Ok(SplitResult {
        tuning: dataset.subset(&order[..n_tune]),
        training: dataset.subset(&order[n_tune..n_tune + n_train]),
        calibration: dataset.subset(&order[n_tune + n_train..]),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference(n: usize) -> Dataset {
        let records = (0..n)
            .map(|i| UnitRecord::new(format!("u{i}"), vec![i as f64]).with_alignment((i % 2) as f64))
            .collect();
        Dataset::new(vec!["x".into()], records, Role::Reference).unwrap()
    }

    #[test]
    fn parses_three_rows() {
        let csv = "unit_id,a,feat_eigv_j\nq1,1,0.5\nq2,0,1.25\nq3,1,2\n";
        let ds = read_dataset(csv.as_bytes(), None, Role::Reference).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.schema(), &["eigv_j".to_string()]);
        assert!(ds.records().iter().all(|r| r.alignment.is_some()));
        assert_eq!(ds.records()[1].features, vec![1.25]);
    }

    #[test]
    fn missing_unit_id_is_schema_error() {
        let csv = "id,a,feat_x\nq1,1,0.5\n";
        let err = read_dataset(csv.as_bytes(), None, Role::Reference).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn test_role_without_alignment_column() {
        let csv = "unit_id,feat_x\nq1,0.5\nq2,0.7\n";
        let ds = read_dataset(csv.as_bytes(), None, Role::Test).unwrap();
        assert!(ds.records().iter().all(|r| r.alignment.is_none()));
    }

    #[test]
    fn empty_optional_cells_are_absent() {
        let csv = "unit_id,a,self_eval,feat_x\nq1,,,0.5\nq2,1,0.3,0.7\n";
        let ds = read_dataset(csv.as_bytes(), None, Role::Test).unwrap();
        assert_eq!(ds.records()[0].alignment, None);
        assert_eq!(ds.records()[0].self_eval, None);
        assert_eq!(ds.records()[1].self_eval, Some(0.3));
    }

    #[test]
    fn non_numeric_feature_names_row_and_column() {
        let csv = "unit_id,a,feat_x\nq1,1,0.5\nq2,1,oops\n";
        match read_dataset(csv.as_bytes(), None, Role::Reference).unwrap_err() {
            Error::Malformed { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "feat_x");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_unit_id_rejected() {
        let csv = "unit_id,a,feat_x\nq1,1,0.5\nq1,0,0.7\n";
        let err = read_dataset(csv.as_bytes(), None, Role::Reference).unwrap_err();
        assert!(matches!(err, Error::DuplicateUnit(ref id) if id == "q1"));
    }

    #[test]
    fn declared_feature_missing() {
        let csv = "unit_id,a,feat_x\nq1,1,0.5\n";
        let schema = vec!["y".to_string()];
        assert!(matches!(
            read_dataset(csv.as_bytes(), Some(&schema), Role::Reference),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn reference_row_missing_alignment() {
        let csv = "unit_id,a,feat_x\nq1,,0.5\n";
        assert!(matches!(
            read_dataset(csv.as_bytes(), None, Role::Reference),
            Err(Error::Malformed { row: 2, .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let records = vec![
            UnitRecord::new("a", vec![0.1, 1.0 / 3.0])
                .with_alignment(1.0)
                .with_self_eval(0.25),
            UnitRecord::new("b", vec![-2.5e-17, 7.0]),
        ];
        let ds = Dataset::new(vec!["p".into(), "q".into()], records, Role::Test).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), None, Role::Test).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn split_sizes_follow_floor() {
        let s = split_dataset(&reference(2000), 0.2, 0.5, 1).unwrap();
        assert_eq!(
            (s.tuning.len(), s.training.len(), s.calibration.len()),
            (400, 1000, 600)
        );
        let s = split_dataset(&reference(10), 0.0, 0.0, 1).unwrap();
        assert_eq!((s.tuning.len(), s.training.len(), s.calibration.len()), (0, 0, 10));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = reference(50);
        assert_eq!(
            split_dataset(&ds, 0.2, 0.3, 9).unwrap(),
            split_dataset(&ds, 0.2, 0.3, 9).unwrap()
        );
        assert_ne!(
            split_dataset(&ds, 0.2, 0.3, 9).unwrap().calibration,
            split_dataset(&ds, 0.2, 0.3, 10).unwrap().calibration
        );
    }

    #[test]
    fn split_parameter_errors() {
        let ds = reference(10);
        assert!(matches!(split_dataset(&ds, 0.5, 0.5, 0), Err(Error::Parameter(_))));
        // floor sizes never exhaust a non-empty set when gamma1 + gamma2 < 1
        assert!(matches!(
            split_dataset(&reference(0), 0.2, 0.5, 0),
            Err(Error::Parameter(_))
        ));
        let test = ds.clone().with_role(Role::Test).unwrap();
        assert!(split_dataset(&test, 0.1, 0.1, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 1usize..300, g1 in 0.0f64..0.5, g2 in 0.0f64..0.49, seed: u64) {
            let ds = reference(n);
            match split_dataset(&ds, g1, g2, seed) {
                Ok(s) => {
                    let mut ids: Vec<&str> = s.tuning.records().iter()
                        .chain(s.training.records())
                        .chain(s.calibration.records())
                        .map(|r| r.unit_id.as_str())
                        .collect();
                    prop_assert_eq!(ids.len(), n);
                    ids.sort();
                    ids.dedup();
                    prop_assert_eq!(ids.len(), n);
                    prop_assert_eq!(s.tuning.len(), (g1 * n as f64 + 1e-9).floor() as usize);
                    prop_assert_eq!(s.training.len(), (g2 * n as f64 + 1e-9).floor() as usize);
                }
                Err(Error::Parameter(_)) => {
                    let used = (g1 * n as f64 + 1e-9).floor() + (g2 * n as f64 + 1e-9).floor();
                    prop_assert!(used as usize >= n);
                }
                Err(e) => prop_assert!(false, "unexpected error {}", e),
            }
        }
    }
}
