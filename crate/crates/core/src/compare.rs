//! Margin-aware prediction comparison.
//!
//! The parallel executors sum `X·B` in a different order than the reference
//! path, so encoded elements lying within rounding distance of zero can flip
//! sign. Rows whose reference top-2 score margin is at or below
//! `1e-3 · D` are therefore reported separately instead of being counted as
//! exact matches or mismatches.

use crate::matrix::Matrix;

/// Relative margin (times `D`) below which a row is treated as ambiguous.
pub const LOW_MARGIN_FRACTION: f32 = 1e-3;

/// Relative tolerance for similarity score comparisons.
pub const SCORE_RTOL: f32 = 1e-5;

/// Difference between the best and second-best score of a row.
pub fn top2_margin(row: &[f32]) -> f32 {
    let mut best = f32::NEG_INFINITY;
    let mut second = f32::NEG_INFINITY;
    for &v in row {
        if v > best {
            second = best;
            best = v;
        } else if v > second {
            second = v;
        }
    }
    if second == f32::NEG_INFINITY {
        f32::INFINITY
    } else {
        best - second
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Agreement {
    /// Rows whose margin clears the threshold.
    pub compared: usize,
    pub matched: usize,
    /// High-margin rows that disagree; any entry here is a failure.
    pub mismatched_rows: Vec<usize>,
    /// Rows excluded from exact-match counting.
    pub low_margin_rows: Vec<usize>,
    /// Low-margin rows whose predictions happened to differ.
    pub low_margin_disagreements: usize,
}

impl Agreement {
    pub fn ok(&self) -> bool {
        self.mismatched_rows.is_empty()
    }

    pub fn merge(&mut self, other: &Agreement, row_offset: usize) {
        self.compared += other.compared;
        self.matched += other.matched;
        self.mismatched_rows
            .extend(other.mismatched_rows.iter().map(|r| r + row_offset));
        self.low_margin_rows
            .extend(other.low_margin_rows.iter().map(|r| r + row_offset));
        self.low_margin_disagreements += other.low_margin_disagreements;
    }
}

/// Compares `candidate` against reference predictions, using the reference
/// scores to decide which rows are decidable.
pub fn compare_predictions(
    reference_scores: &Matrix,
    reference: &[usize],
    candidate: &[usize],
    dim: usize,
) -> Agreement {
    assert_eq!(reference.len(), candidate.len(), "prediction length mismatch");
    assert_eq!(reference.len(), reference_scores.rows());
    let threshold = LOW_MARGIN_FRACTION * dim as f32;
    let mut out = Agreement::default();
    for (i, (&r, &c)) in reference.iter().zip(candidate).enumerate() {
        if top2_margin(reference_scores.row(i)) <= threshold {
            out.low_margin_rows.push(i);
            if r != c {
                out.low_margin_disagreements += 1;
            }
            continue;
        }
        out.compared += 1;
        if r == c {
            out.matched += 1;
        } else {
            out.mismatched_rows.push(i);
        }
    }
    out
}

/// `|a - b| <= rtol · max(|a|, |b|, 1)` element-wise.
pub fn scores_close(a: &[f32], b: &[f32], rtol: f32) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(&x, &y)| (x - y).abs() <= rtol * x.abs().max(y.abs()).max(1.0))
}
