//! Soft mutual matching.
//!
//! Each pass rescales every entry by how close it is to the best score of its
//! row and of its column:
//!
//! ```text
//! M  = C / (max over targets of C + eps)
//! M' = C / (max over sources of C + eps)
//! C_hat = M * C * M'
//! ```
//!
//! The filter has no parameters beyond `eps`; entries that are maximal in both
//! directions keep (almost) their value while everything else is damped.

use crate::corr4d::{max_tables, CorrelationTensor4D, MaxTables};

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_PASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MMConfig {
    pub epsilon: f64,
    pub passes: usize,
}

impl Default for MMConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            passes: DEFAULT_PASSES,
        }
    }
}

impl MMConfig {
    pub fn new(epsilon: f64, passes: usize) -> Result<Self, String> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(format!("epsilon must be positive, got {epsilon}"));
        }
        if passes == 0 {
            return Err("at least one mutual matching pass is required".into());
        }
        Ok(Self { epsilon, passes })
    }
}

/// One mutual-matching pass: the max tables of the tensor it was computed
/// from, and the epsilon.
#[derive(Clone, Debug, PartialEq)]
pub struct MmLayer {
    pub tables: MaxTables,
    pub epsilon: f64,
}

impl MmLayer {
    /// Filtered value of entry `(s, t)` whose pre-pass value is `c`.
    ///
    /// Evaluated as `c^3 / ((row_max + eps) * (col_max + eps))` in `f64`,
    /// which is symmetric in the two maxima so a transposed tensor filters to
    /// the bit-identical transposed result.
    #[inline]
    pub fn apply(&self, c: f32, s: usize, t: usize) -> f32 {
        filter_value(
            c,
            self.tables.row_max[s],
            self.tables.col_max[t],
            self.epsilon,
        )
    }

    pub fn transposed(&self) -> Self {
        Self {
            tables: self.tables.swapped(),
            epsilon: self.epsilon,
        }
    }
}

#[inline]
pub fn filter_value(c: f32, row_max: f32, col_max: f32, epsilon: f64) -> f32 {
    let c = c as f64;
    let den = (row_max as f64 + epsilon) * (col_max as f64 + epsilon);
    (c * c * c / den) as f32
}

/// Applies `cfg.passes` mutual-matching passes. Dense tensors are rewritten
/// in place; streamed tensors gain one max-table layer per pass, each table
/// computed by a sweep over the tensor as filtered so far.
pub fn mm_filter(mut t: CorrelationTensor4D, cfg: &MMConfig) -> CorrelationTensor4D {
    for _ in 0..cfg.passes {
        let tables = max_tables(&t);
        t.push_layer(MmLayer {
            tables,
            epsilon: cfg.epsilon,
        });
    }
    t
}

/// Per-source-cell reliability: the best filtered correlation of the cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGrid {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f32>,
}

impl ScoreGrid {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.scores[y * self.width + x]
    }

    /// Cells with a positive score, best first; ties resolve to the
    /// lexicographically smallest `(y, x)`. At most `k` cells.
    pub fn top_k(&self, k: usize) -> Vec<((usize, usize), f32)> {
        let mut cells: Vec<(usize, f32)> = self
            .scores
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, v)| v > 0.0)
            .collect();
        cells.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cells.truncate(k);
        cells
            .into_iter()
            .map(|(i, v)| ((i % self.width, i / self.width), v))
            .collect()
    }
}

pub fn reliability_scores(t: &CorrelationTensor4D) -> ScoreGrid {
    ScoreGrid {
        width: t.src_grid.w,
        height: t.src_grid.h,
        scores: max_tables(t).row_max,
    }
}
