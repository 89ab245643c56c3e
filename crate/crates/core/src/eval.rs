//! Per-domain error tracking, backward/forward transfer and memory purity.
//!
//! Transfer metrics are expressed for an error metric (lower is better):
//! positive BWT means later training reduced the error on earlier domains,
//! positive FWT means training before a domain arrived already reduced its
//! error below the pretrained baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CasaError, Result};
use crate::learner::{mean_absolute_error, TaskLearner};
use crate::stream::StreamSample;

/// MAE of `learner` on each true domain's test set.
pub fn evaluate_checkpoint(learner: &TaskLearner, test_sets: &[Vec<StreamSample>]) -> Result<Vec<f64>> {
    test_sets
        .iter()
        .map(|set| {
            if set.is_empty() {
                return Err(CasaError::Empty("test set"));
            }
            let pairs: Vec<(f64, f64)> = set
                .iter()
                .map(|s| (learner.predict(&s.image), s.truth().label))
                .collect();
            mean_absolute_error(&pairs)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Input batches processed when the row was taken.
    pub step: usize,
    /// Stream samples processed when the row was taken.
    pub processed: usize,
    /// Schedule segment that ended at this checkpoint, if any.
    pub segment_end: Option<usize>,
}

/// Checkpointed per-domain error matrix plus the pretrained baseline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RMatrix {
    pub checkpoints: Vec<Checkpoint>,
    pub rows: Vec<Vec<f64>>,
    /// Pretrained-only model's error per true domain.
    pub baseline: Vec<f64>,
}

impl RMatrix {
    pub fn new(baseline: Vec<f64>) -> Self {
        Self {
            checkpoints: Vec::new(),
            rows: Vec::new(),
            baseline,
        }
    }

    pub fn push(&mut self, checkpoint: Checkpoint, row: Vec<f64>) -> Result<()> {
        if row.len() != self.baseline.len() {
            return Err(CasaError::DimensionMismatch {
                expected: self.baseline.len(),
                actual: row.len(),
                context: "R matrix row",
            });
        }
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CasaError::Domain("R matrix entries must be finite and non-negative".into()));
        }
        self.checkpoints.push(checkpoint);
        self.rows.push(row);
        Ok(())
    }

    pub fn final_row(&self) -> Option<&Vec<f64>> {
        self.rows.last()
    }

    /// Rows at the domain-boundary checkpoints plus the final row.
    ///
    /// `intro_segment[d]` is the schedule segment in which true domain `d`
    /// first appears. The boundary row for domain `d` is the checkpoint that
    /// closed the segment before domain `d + 1` arrived, or the first
    /// (pretrained) row if `d + 1` is present from the start.
    pub fn boundary_rows(&self, intro_segment: &[usize]) -> Option<Vec<Vec<f64>>> {
        let t = intro_segment.len();
        if t < 2 || self.rows.is_empty() {
            return None;
        }
        let mut out = Vec::with_capacity(t);
        for &seg in &intro_segment[1..] {
            let idx = if seg == 0 {
                0
            } else {
                self.checkpoints
                    .iter()
                    .position(|c| c.segment_end == Some(seg - 1))?
            };
            out.push(self.rows[idx].clone());
        }
        out.push(self.rows.last()?.clone());
        Some(out)
    }
}

fn check_square(rows: &[Vec<f64>]) -> Result<usize> {
    let t = rows.len();
    if t < 2 {
        return Err(CasaError::Domain(
            "transfer metrics need at least two domains".into(),
        ));
    }
    if rows.iter().any(|r| r.len() < t) {
        return Err(CasaError::DimensionMismatch {
            expected: t,
            actual: rows.iter().map(Vec::len).min().unwrap_or(0),
            context: "boundary row width",
        });
    }
    Ok(t)
}

/// `1/(T-1) * sum_{i<T-1} (R[i][i] - R[T-1][i])`.
pub fn compute_bwt(boundary_rows: &[Vec<f64>]) -> Result<f64> {
    let t = check_square(boundary_rows)?;
    let last = &boundary_rows[t - 1];
    let sum: f64 = (0..t - 1).map(|i| boundary_rows[i][i] - last[i]).sum();
    Ok(sum / (t - 1) as f64)
}

/// `1/(T-1) * sum_{i>=1} (b[i] - R[i-1][i])`.
pub fn compute_fwt(boundary_rows: &[Vec<f64>], baseline: &[f64]) -> Result<f64> {
    let t = check_square(boundary_rows)?;
    if baseline.len() < t {
        return Err(CasaError::DimensionMismatch {
            expected: t,
            actual: baseline.len(),
            context: "baseline errors",
        });
    }
    let sum: f64 = (1..t).map(|i| baseline[i] - boundary_rows[i - 1][i]).sum();
    Ok(sum / (t - 1) as f64)
}

/// Contingency table of pseudo-domain versus true domain for memory items.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PurityReport {
    /// Pseudo-domain id to counts per true domain.
    pub table: BTreeMap<usize, Vec<usize>>,
    /// Pseudo-domain id to its largest true-domain share.
    pub purity: BTreeMap<usize, f64>,
}

impl PurityReport {
    pub fn total(&self) -> usize {
        self.table.values().flatten().sum()
    }

    /// Items per pseudo-domain (row marginals).
    pub fn row_totals(&self) -> BTreeMap<usize, usize> {
        self.table.iter().map(|(&d, c)| (d, c.iter().sum())).collect()
    }

    pub fn min_purity(&self) -> Option<f64> {
        self.purity.values().copied().reduce(f64::min)
    }
}

/// Builds the report from `(pseudo-domain, true domain)` pairs.
pub fn purity_report(pairs: &[(usize, usize)], n_true: usize) -> PurityReport {
    let mut table: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(pseudo, truth) in pairs {
        let row = table.entry(pseudo).or_insert_with(|| vec![0; n_true]);
        if truth >= row.len() {
            row.resize(truth + 1, 0);
        }
        row[truth] += 1;
    }
    let purity = table
        .iter()
        .map(|(&d, row)| {
            let total: usize = row.iter().sum();
            let max = row.iter().copied().max().unwrap_or(0);
            (d, max as f64 / total as f64)
        })
        .collect();
    PurityReport { table, purity }
}

/// Shannon entropy (nats) of a count vector; zero counts are skipped.
pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}
