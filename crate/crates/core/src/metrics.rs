//! Evaluation metrics: token accuracy, m-error sequence accuracy, confusion
//! matrices, and per-component date accuracy.
//!
//! Token comparison is strictly positional (no edit-distance realignment):
//! the `<Start>` token is excluded, `<End>` is included, and when prediction
//! and truth differ in length the shorter side is padded so that padded
//! positions always mismatch. A single missing token therefore shifts and
//! penalises the rest of the sequence.

use thiserror::Error;

use crate::tokens::{parse_date, DateParts, DictKind, TokenSequence};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no evaluation pairs")]
    Empty,
    #[error("dictionary mismatch: truth is {truth:?}, prediction is {pred:?}")]
    DictionaryMismatch { truth: DictKind, pred: DictKind },
    #[error("confusion matrix has zero total")]
    EmptyMatrix,
    #[error("unknown class {0:?}")]
    UnknownClass(String),
}

/// One scored (ground truth, prediction) sequence pair.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub truth: TokenSequence,
    pub pred: TokenSequence,
    pub doc_id: String,
    pub field: String,
}

impl EvalPair {
    pub fn new(truth: TokenSequence, pred: TokenSequence) -> Result<Self, MetricsError> {
        if truth.kind() != pred.kind() {
            return Err(MetricsError::DictionaryMismatch {
                truth: truth.kind(),
                pred: pred.kind(),
            });
        }
        Ok(EvalPair { truth, pred, doc_id: String::new(), field: String::new() })
    }

    pub fn with_ids(mut self, doc_id: &str, field: &str) -> Self {
        self.doc_id = doc_id.to_string();
        self.field = field.to_string();
        self
    }
}

/// A rate plus its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Positional comparison of one pair: (matches, scored positions).
///
/// Scored positions run from just after `<Start>` to the end of the longer
/// side; the shorter side is padded with a value guaranteed to mismatch.
fn positional_counts(pair: &EvalPair) -> (usize, usize) {
    let t = pair.truth.ids();
    let p = pair.pred.ids();
    let k = t.len() - 1; // scored truth positions
    let h = p.len() - 1;
    let len = k.max(h);
    let mut matches = 0;
    for j in 1..=len {
        match (t.get(j), p.get(j)) {
            (Some(a), Some(b)) if a == b => matches += 1,
            _ => {}
        }
    }
    (matches, len)
}

fn check_pairs(pairs: &[EvalPair]) -> Result<(), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    for pair in pairs {
        if pair.truth.kind() != pair.pred.kind() {
            return Err(MetricsError::DictionaryMismatch {
                truth: pair.truth.kind(),
                pred: pair.pred.kind(),
            });
        }
    }
    Ok(())
}

/// Token accuracy: matched positions over scored positions, pooled across
/// the corpus.
pub fn token_accuracy(pairs: &[EvalPair]) -> Result<AccuracyEstimate, MetricsError> {
    check_pairs(pairs)?;
    let mut matches = 0usize;
    let mut total = 0usize;
    for pair in pairs {
        let (m, k) = positional_counts(pair);
        matches += m;
        total += k;
    }
    let value = matches as f64 / total as f64;
    let std_error = (value * (1.0 - value) / total as f64).sqrt();
    Ok(AccuracyEstimate { value, std_error })
}

/// Proportion of sequences with at most `m` positional mismatches.
pub fn sequence_accuracy(pairs: &[EvalPair], m: usize) -> Result<AccuracyEstimate, MetricsError> {
    check_pairs(pairs)?;
    let n = pairs.len();
    let correct = pairs
        .iter()
        .filter(|pair| {
            let (matches, k) = positional_counts(pair);
            k - matches <= m
        })
        .count();
    let value = correct as f64 / n as f64;
    let std_error = (value * (1.0 - value) / n as f64).sqrt();
    Ok(AccuracyEstimate { value, std_error })
}

/// Confusion matrix; rows are ground truth, columns are predictions.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let k = classes.len();
        ConfusionMatrix { classes, counts: vec![vec![0; k]; k] }
    }

    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Self {
        assert_eq!(counts.len(), classes.len());
        assert!(counts.iter().all(|row| row.len() == classes.len()));
        ConfusionMatrix { classes, counts }
    }

    pub fn from_labels<S: AsRef<str>>(
        classes: Vec<String>,
        truth: &[S],
        pred: &[S],
    ) -> Result<Self, MetricsError> {
        assert_eq!(truth.len(), pred.len());
        let mut cm = ConfusionMatrix::new(classes);
        for (t, p) in truth.iter().zip(pred.iter()) {
            cm.record(t.as_ref(), p.as_ref())?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: &str, pred: &str) -> Result<(), MetricsError> {
        let ti = self.index_of(truth)?;
        let pi = self.index_of(pred)?;
        self.counts[ti][pi] += 1;
        Ok(())
    }

    fn index_of(&self, class: &str) -> Result<usize, MetricsError> {
        self.classes
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| MetricsError::UnknownClass(class.to_string()))
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn count(&self, truth: &str, pred: &str) -> u64 {
        let ti = self.index_of(truth).unwrap();
        let pi = self.index_of(pred).unwrap();
        self.counts[ti][pi]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Per-class detection statistics. `precision`/`recall` are `None` when the
/// corresponding denominator is zero (undefined, not an error).
#[derive(Debug, Clone, Copy)]
pub struct ClassStats {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: f64,
    /// Accuracy of always predicting the most common ground-truth class.
    pub majority_baseline: f64,
}

pub fn confusion_stats(cm: &ConfusionMatrix, positive: &str) -> Result<ClassStats, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let pi = cm.index_of(positive)?;
    let tp = cm.counts[pi][pi];
    let row_sum: u64 = cm.counts[pi].iter().sum();
    let col_sum: u64 = cm.counts.iter().map(|row| row[pi]).sum();
    let precision = if col_sum > 0 { Some(tp as f64 / col_sum as f64) } else { None };
    let recall = if row_sum > 0 { Some(tp as f64 / row_sum as f64) } else { None };
    let trace: u64 = (0..cm.classes.len()).map(|i| cm.counts[i][i]).sum();
    let majority: u64 =
        cm.counts.iter().map(|row| row.iter().sum::<u64>()).max().unwrap_or(0);
    Ok(ClassStats {
        precision,
        recall,
        accuracy: trace as f64 / total as f64,
        majority_baseline: majority as f64 / total as f64,
    })
}

/// Zero-error accuracy of the individual date components.
#[derive(Debug, Clone, Copy)]
pub struct DateComponentAccuracy {
    pub day: AccuracyEstimate,
    pub month: AccuracyEstimate,
    pub year: AccuracyEstimate,
}

fn component_flags(truth: &str, pred: &str) -> (bool, bool, bool) {
    let (t, p) = match (parse_date(truth), parse_date(pred)) {
        (Ok(t), Ok(p)) => (t, p),
        // either side unparseable: every component scores a mismatch
        _ => return (false, false, false),
    };
    let year_eq = |a: &DateParts, b: &DateParts| {
        a.year_digits.len() == b.year_digits.len() && a.year_value() == b.year_value()
    };
    (t.day == p.day, t.month == p.month, year_eq(&t, &p))
}

/// Compare date texts component-wise with the same normalisation rules as
/// date equivalence (leading zeros ignored, centuries never guessed).
pub fn date_component_accuracy(
    pairs: &[(String, String)],
) -> Result<DateComponentAccuracy, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = pairs.len() as f64;
    let (mut day, mut month, mut year) = (0u64, 0u64, 0u64);
    for (truth, pred) in pairs {
        let (d, m, y) = component_flags(truth, pred);
        day += d as u64;
        month += m as u64;
        year += y as u64;
    }
    let est = |correct: u64| {
        let value = correct as f64 / n;
        AccuracyEstimate { value, std_error: (value * (1.0 - value) / n).sqrt() }
    };
    Ok(DateComponentAccuracy { day: est(day), month: est(month), year: est(year) })
}
