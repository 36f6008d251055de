//! Cross-field verification: implied age versus transcribed age,
//! intention-to-treat/compliance accounting, and the lifetime-distribution
//! density output.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokens::CivilDate;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("two-digit year; the century cannot be inferred")]
    AmbiguousYear,
    #[error("death date precedes birth date")]
    DeathBeforeBirth,
    #[error("no values after restricting to the grid range")]
    EmptyAfterFiltering,
    #[error("automatic bandwidth needs at least 2 values, got {0}")]
    TooFewForBandwidth(usize),
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("grid must have lo < hi and n >= 2")]
    BadGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Ml,
    Crowd,
    Truth,
}

/// Per-document decoded fields relevant to verification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Record {
    pub doc_id: String,
    pub birth: Option<CivilDate>,
    pub death: Option<CivilDate>,
    pub age_years: Option<i64>,
    pub source: Source,
}

/// Completed years between birth and death (leap-aware: the year count drops
/// by one when the death falls before the birthday anniversary).
pub fn implied_age_years(birth: &CivilDate, death: &CivilDate) -> Result<i64, VerifyError> {
    use crate::tokens::Year;
    let (by, dy) = match (birth.year, death.year) {
        (Year::Full(b), Year::Full(d)) => (b as i64, d as i64),
        _ => return Err(VerifyError::AmbiguousYear),
    };
    if (dy, death.month, death.day) < (by, birth.month, birth.day) {
        return Err(VerifyError::DeathBeforeBirth);
    }
    let before_anniversary = (death.month, death.day) < (birth.month, birth.day);
    Ok(dy - by - before_anniversary as i64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagReason {
    AgeMismatch,
    TwoDigitYear,
    MissingField,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Flagged {
    pub doc_id: String,
    pub reason: FlagReason,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencySummary {
    pub total: usize,
    pub consistent: usize,
    pub flagged: usize,
    pub consistent_fraction: f64,
    /// Share of records left for manual review.
    pub review_burden: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub consistent: Vec<String>,
    pub flagged: Vec<Flagged>,
    pub summary: ConsistencySummary,
}

/// Partition records into consistent and flagged.
///
/// A record is consistent when the age implied by its dates and the
/// transcribed age differ by at most `tolerance_years` (the boundary is
/// inclusive: "differ by more than one year" flags only differences of two
/// or more at the default tolerance of 1). Records with missing fields or
/// two-digit years cannot be checked and are flagged with their reason.
pub fn consistency_filter(records: &[Record], tolerance_years: i64) -> ConsistencyReport {
    assert!(tolerance_years >= 0);
    let mut consistent = Vec::new();
    let mut flagged = Vec::new();
    for record in records {
        let (birth, death, age) = match (&record.birth, &record.death, record.age_years) {
            (Some(b), Some(d), Some(a)) => (b, d, a),
            _ => {
                flagged.push(Flagged {
                    doc_id: record.doc_id.clone(),
                    reason: FlagReason::MissingField,
                });
                continue;
            }
        };
        match implied_age_years(birth, death) {
            Ok(implied) if (implied - age).abs() <= tolerance_years => {
                consistent.push(record.doc_id.clone());
            }
            Ok(_) => {
                flagged.push(Flagged {
                    doc_id: record.doc_id.clone(),
                    reason: FlagReason::AgeMismatch,
                });
            }
            Err(VerifyError::AmbiguousYear) => {
                flagged.push(Flagged {
                    doc_id: record.doc_id.clone(),
                    reason: FlagReason::TwoDigitYear,
                });
            }
            // chronologically impossible dates cannot match any age
            Err(_) => {
                flagged.push(Flagged {
                    doc_id: record.doc_id.clone(),
                    reason: FlagReason::AgeMismatch,
                });
            }
        }
    }
    let total = records.len();
    let summary = ConsistencySummary {
        total,
        consistent: consistent.len(),
        flagged: flagged.len(),
        consistent_fraction: if total > 0 { consistent.len() as f64 / total as f64 } else { 0.0 },
        review_burden: if total > 0 { flagged.len() as f64 / total as f64 } else { 0.0 },
    };
    ConsistencyReport { consistent, flagged, summary }
}

/// One person in the compliance accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonRecord {
    pub birth: Option<CivilDate>,
    pub detected_treated: bool,
}

/// Intention-to-treat versus detected-treatment bookkeeping.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ComplianceTable {
    /// Eligible by the assignment rule (birth day in `eligible_days`).
    pub eligible: u64,
    pub treated_eligible: u64,
    pub treated_ineligible: u64,
    pub untreated_eligible: u64,
    pub untreated_ineligible: u64,
    /// Rule violations in either direction.
    pub non_compliers: u64,
    /// treated & eligible over eligible; `None` when nobody is eligible.
    pub uptake: Option<f64>,
    pub missing_birth: u64,
}

pub fn compliance_table(people: &[PersonRecord], eligible_days: &BTreeSet<u8>) -> ComplianceTable {
    let mut t = ComplianceTable {
        eligible: 0,
        treated_eligible: 0,
        treated_ineligible: 0,
        untreated_eligible: 0,
        untreated_ineligible: 0,
        non_compliers: 0,
        uptake: None,
        missing_birth: 0,
    };
    for person in people {
        let Some(birth) = &person.birth else {
            t.missing_birth += 1;
            continue;
        };
        let eligible = eligible_days.contains(&birth.day);
        if eligible {
            t.eligible += 1;
        }
        match (eligible, person.detected_treated) {
            (true, true) => t.treated_eligible += 1,
            (true, false) => t.untreated_eligible += 1,
            (false, true) => t.treated_ineligible += 1,
            (false, false) => t.untreated_ineligible += 1,
        }
    }
    t.non_compliers = t.untreated_eligible + t.treated_ineligible;
    if t.eligible > 0 {
        t.uptake = Some(t.treated_eligible as f64 / t.eligible as f64);
    }
    t
}

/// The first three days of each month, the assignment rule of the visiting
/// programme.
pub fn default_eligible_days() -> BTreeSet<u8> {
    BTreeSet::from([1, 2, 3])
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Silverman's rule: 1.06 * sd * n^(-1/5).
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self, VerifyError> {
        if !(lo < hi) || n < 2 {
            return Err(VerifyError::BadGrid);
        }
        Ok(GridSpec { lo, hi, n })
    }
}

/// Gaussian kernel density estimate over an evenly spaced grid. Values
/// outside `[grid.lo, grid.hi]` are discarded before estimation.
pub fn kde_density(
    values: &[f64],
    bandwidth: Bandwidth,
    grid: &GridSpec,
) -> Result<Vec<(f64, f64)>, VerifyError> {
    let kept: Vec<f64> =
        values.iter().copied().filter(|v| v.is_finite() && *v >= grid.lo && *v <= grid.hi).collect();
    if kept.is_empty() {
        return Err(VerifyError::EmptyAfterFiltering);
    }
    let n = kept.len();
    let h = match bandwidth {
        Bandwidth::Fixed(h) => {
            if !(h > 0.0) {
                return Err(VerifyError::BadBandwidth(h));
            }
            h
        }
        Bandwidth::Auto => {
            if n < 2 {
                return Err(VerifyError::TooFewForBandwidth(n));
            }
            let mean = kept.iter().sum::<f64>() / n as f64;
            let var = kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = var.sqrt();
            if sd <= 0.0 {
                return Err(VerifyError::BadBandwidth(0.0));
            }
            1.06 * sd * (n as f64).powf(-0.2)
        }
    };
    let inv = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let step = (grid.hi - grid.lo) / (grid.n - 1) as f64;
    let out = (0..grid.n)
        .map(|i| {
            let x = grid.lo + i as f64 * step;
            let density: f64 =
                kept.iter().map(|v| (-((x - v) / h).powi(2) / 2.0).exp()).sum::<f64>() * inv;
            (x, density)
        })
        .collect();
    Ok(out)
}
