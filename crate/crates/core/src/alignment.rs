//! True alignment scores: rouge-L thresholding for free-text answers and
//! label agreement for 14-label report vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default rouge-L cutoff for declaring a QA answer aligned (inclusive).
pub const QA_ROUGE_THRESHOLD: f64 = 0.3;
/// Length of a radiology label vector.
pub const LABEL_COUNT: usize = 14;
/// Default number of agreeing labels for a report to count as aligned.
pub const MIN_LABEL_MATCHES: usize = 12;

/// Lowercased whitespace tokens with surrounding punctuation removed.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn tokenize(text: &str) -> Self {
        let tokens = text
            .split_whitespace()
            .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        Self(tokens)
    }

    /// Wraps pre-split tokens, dropping empty strings.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(
            tokens
                .into_iter()
                .map(Into::into)
                .filter(|t: &String| !t.is_empty())
                .collect(),
        )
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fixed-length binary label vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector([u8; LABEL_COUNT]);

impl LabelVector {
    pub fn new(labels: &[u8]) -> Result<Self> {
        if labels.len() != LABEL_COUNT {
            return Err(Error::LengthMismatch {
                expected: LABEL_COUNT,
                actual: labels.len(),
            });
        }
        if let Some(bad) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::Parameter(format!("label value {bad} is not binary")));
        }
        let mut out = [0u8; LABEL_COUNT];
        out.copy_from_slice(labels);
        Ok(Self(out))
    }

    pub fn labels(&self) -> &[u8; LABEL_COUNT] {
        &self.0
    }
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let (a, b) = if a.len() < b.len() { (b, a) } else { (a, b) };
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Rouge-L F1 between two token sequences; 0 when either side is empty.
pub fn rouge_l(candidate: &TokenSequence, reference: &TokenSequence) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate.tokens(), reference.tokens());
    if l == 0 {
        return 0.0;
    }
    // 2PR/(P+R) with P = l/|c|, R = l/|r| reduces to 2l/(|c|+|r|)
    2.0 * l as f64 / (candidate.len() + reference.len()) as f64
}

/// 1 when rouge-L reaches `threshold` (inclusive), else 0.
pub fn qa_alignment(candidate: &TokenSequence, reference: &TokenSequence, threshold: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Parameter(format!("rouge threshold {threshold} outside [0, 1]")));
    }
    Ok(u8::from(rouge_l(candidate, reference) >= threshold))
}

/// 1 when at least `min_matches` of the 14 labels agree.
pub fn label_match_alignment(a: &LabelVector, b: &LabelVector, min_matches: usize) -> Result<u8> {
    if min_matches > LABEL_COUNT {
        return Err(Error::Parameter(format!(
            "min_matches {min_matches} exceeds {LABEL_COUNT}"
        )));
    }
    let matches = a.0.iter().zip(&b.0).filter(|(x, y)| x == y).count();
    Ok(u8::from(matches >= min_matches))
}
