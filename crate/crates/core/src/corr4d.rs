//! The 4D correlation tensor between two coarse feature maps.
//!
//! Entry `(s, t)` is the dot product of source cell `s` and target cell `t`,
//! accumulated in `f64` in ascending channel order, clamped to `[0, 1]` and
//! stored as `f32`. A tensor is either materialized (`Dense`) or `Streamed`:
//! entries are recomputed tile by tile from the two feature maps so that no
//! more than `budget` bytes of tensor values exist at once. Both storages
//! produce bit-identical values.
//!
//! Mutual-matching passes are recorded on streamed tensors as a stack of
//! [`MmLayer`]s and replayed per entry; on dense tensors they are applied in
//! place.

use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::features::FeatureMap;
use crate::map::CorrelationMap2D;
use crate::mmfilter::MmLayer;

/// Default memory budget for tensor values: 1 GiB.
pub const DEFAULT_BUDGET: usize = 1 << 30;

const LANES: usize = 8;
const ROW_BLOCK: usize = 16;
const TGT_TILE: usize = 512;

#[derive(Debug, Error, PartialEq)]
pub enum CorrError {
    #[error("dense tensor needs {needed} bytes, budget is {budget}")]
    BudgetExceeded { needed: usize, budget: usize },
    #[error("channel mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("cell ({x},{y}) outside {w}x{h} grid")]
    OutOfRange {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
    },
    #[error("dense data has {0} values, grids need {1}")]
    BadLength(usize, usize),
}

/// Width and height of a cell grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub w: usize,
    pub h: usize,
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.w * self.h
    }

    fn of(map: &FeatureMap) -> Self {
        Grid {
            w: map.grid_w,
            h: map.grid_h,
        }
    }
}

/// Row maxima (per source cell, over all targets) and column maxima (per
/// target cell, over all sources).
#[derive(Clone, Debug, PartialEq)]
pub struct MaxTables {
    pub row_max: Vec<f32>,
    pub col_max: Vec<f32>,
}

impl MaxTables {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            row_max: vec![0.0; rows],
            col_max: vec![0.0; cols],
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            row_max: self.col_max.clone(),
            col_max: self.row_max.clone(),
        }
    }
}

/// Feature-backed tensor source: both maps plus the target map in
/// channel-major order for the lane kernel.
#[derive(Clone, Debug)]
struct Operands {
    src: Arc<FeatureMap>,
    tgt: Arc<FeatureMap>,
    tgt_cm: Arc<Vec<f64>>,
    src_cm: Arc<Vec<f64>>,
}

impl Operands {
    fn new(src: Arc<FeatureMap>, tgt: Arc<FeatureMap>) -> Self {
        let widen = |m: &FeatureMap| {
            Arc::new(
                m.channel_major()
                    .into_iter()
                    .map(f64::from)
                    .collect::<Vec<_>>(),
            )
        };
        let (src_cm, tgt_cm) = (widen(&src), widen(&tgt));
        Self {
            src,
            tgt,
            tgt_cm,
            src_cm,
        }
    }

    fn swapped(&self) -> Self {
        Self {
            src: self.tgt.clone(),
            tgt: self.src.clone(),
            tgt_cm: self.src_cm.clone(),
            src_cm: self.tgt_cm.clone(),
        }
    }

    /// Raw correlations of source cell `s` against targets `cols`.
    fn raw_row(&self, s: usize, cols: Range<usize>, out: &mut [f32]) {
        debug_assert_eq!(out.len(), cols.len());
        let a = self.src.cell_at(s);
        let n = self.tgt.cells();
        let mut t = cols.start;
        let mut chunks = out.chunks_exact_mut(LANES);
        for chunk in &mut chunks {
            let mut acc = [0.0f64; LANES];
            for (c, &av) in a.iter().enumerate() {
                let av = av as f64;
                let b = &self.tgt_cm[c * n + t..c * n + t + LANES];
                for j in 0..LANES {
                    acc[j] += av * b[j];
                }
            }
            for (o, v) in chunk.iter_mut().zip(acc) {
                *o = finish(v);
            }
            t += LANES;
        }
        for o in chunks.into_remainder() {
            let mut acc = 0.0f64;
            for (c, &av) in a.iter().enumerate() {
                acc += av as f64 * self.tgt_cm[c * n + t];
            }
            *o = finish(acc);
            t += 1;
        }
    }
}

#[inline]
fn finish(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// Reference dot product in the canonical accumulation order.
pub fn correlation(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x as f64 * y as f64;
    }
    finish(acc)
}

#[derive(Clone, Debug)]
enum Storage {
    Dense(Vec<f32>),
    Streamed { ops: Operands, layers: Vec<MmLayer> },
}

/// The correlation tensor over `src_grid x tgt_grid`, layout `[y][x][y'][x']`.
#[derive(Clone, Debug)]
pub struct CorrelationTensor4D {
    pub src_grid: Grid,
    pub tgt_grid: Grid,
    budget: usize,
    storage: Storage,
}

/// Tile shape: a block of source rows, each covering a block of targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub src_block: usize,
    pub tgt_block: usize,
}

impl TilePlan {
    /// Largest tile that fits `budget` bytes of `f32` values, at least one
    /// entry. Whole target rows are preferred.
    pub fn for_budget(budget: usize, n_src: usize, n_tgt: usize) -> Self {
        let entries = (budget / 4).max(1);
        if entries >= n_tgt {
            TilePlan {
                src_block: (entries / n_tgt).clamp(1, n_src.max(1)),
                tgt_block: n_tgt,
            }
        } else {
            TilePlan {
                src_block: 1,
                tgt_block: entries,
            }
        }
    }

    pub fn bytes(&self) -> usize {
        self.src_block * self.tgt_block * 4
    }
}

impl CorrelationTensor4D {
    /// Wraps explicit tensor values (layout `[src cell][tgt cell]`).
    pub fn from_dense(src_grid: Grid, tgt_grid: Grid, data: Vec<f32>) -> Result<Self, CorrError> {
        let n = src_grid.cells() * tgt_grid.cells();
        if data.len() != n {
            return Err(CorrError::BadLength(data.len(), n));
        }
        Ok(Self {
            src_grid,
            tgt_grid,
            budget: usize::MAX,
            storage: Storage::Dense(data),
        })
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Number of mutual-matching passes recorded on a streamed tensor.
    pub fn layers(&self) -> usize {
        match &self.storage {
            Storage::Dense(_) => 0,
            Storage::Streamed { layers, .. } => layers.len(),
        }
    }

    pub fn dense_bytes(&self) -> usize {
        self.src_grid.cells() * self.tgt_grid.cells() * 4
    }

    /// Bytes of tensor values currently held (tiles excluded).
    pub fn resident_bytes(&self) -> usize {
        match &self.storage {
            Storage::Dense(d) => d.len() * 4,
            Storage::Streamed { layers, .. } => layers
                .iter()
                .map(|l| 4 * (l.tables.row_max.len() + l.tables.col_max.len()))
                .sum(),
        }
    }

    pub fn tile_plan(&self) -> TilePlan {
        TilePlan::for_budget(self.budget, self.src_grid.cells(), self.tgt_grid.cells())
    }

    pub fn dense_data(&self) -> Option<&[f32]> {
        match &self.storage {
            Storage::Dense(d) => Some(d),
            Storage::Streamed { .. } => None,
        }
    }

    /// Value of entry `(s, t)`.
    pub fn entry(&self, s: usize, t: usize) -> f32 {
        match &self.storage {
            Storage::Dense(d) => d[s * self.tgt_grid.cells() + t],
            Storage::Streamed { ops, layers } => {
                let mut v = [0.0];
                ops.raw_row(s, t..t + 1, &mut v);
                layers.iter().fold(v[0], |c, l| l.apply(c, s, t))
            }
        }
    }

    /// Calls `visit(src_rows, tgt_cols, values)` for every tile in row-major
    /// tile order; `values` is `[row][col]` over the tile.
    pub fn for_each_tile(&self, mut visit: impl FnMut(Range<usize>, Range<usize>, &[f32])) {
        let (n_src, n_tgt) = (self.src_grid.cells(), self.tgt_grid.cells());
        match &self.storage {
            Storage::Dense(d) => {
                for s in 0..n_src {
                    visit(s..s + 1, 0..n_tgt, &d[s * n_tgt..(s + 1) * n_tgt]);
                }
            }
            Storage::Streamed { ops, layers } => {
                let plan = self.tile_plan();
                let mut buf = vec![0.0f32; plan.src_block * plan.tgt_block];
                for s0 in (0..n_src).step_by(plan.src_block) {
                    let rows = s0..(s0 + plan.src_block).min(n_src);
                    for t0 in (0..n_tgt).step_by(plan.tgt_block) {
                        let cols = t0..(t0 + plan.tgt_block).min(n_tgt);
                        let width = cols.len();
                        let tile = &mut buf[..rows.len() * width];
                        tile.par_chunks_mut(width).enumerate().for_each(|(i, out)| {
                            let s = rows.start + i;
                            ops.raw_row(s, cols.clone(), out);
                            for l in layers {
                                for (k, v) in out.iter_mut().enumerate() {
                                    *v = l.apply(*v, s, cols.start + k);
                                }
                            }
                        });
                        visit(rows.clone(), cols, tile);
                    }
                }
            }
        }
    }

    /// Materializes every entry. Intended for small tensors and tests.
    pub fn to_dense_vec(&self) -> Vec<f32> {
        if let Storage::Dense(d) = &self.storage {
            return d.clone();
        }
        let n_tgt = self.tgt_grid.cells();
        let mut out = vec![0.0; self.src_grid.cells() * n_tgt];
        self.for_each_tile(|rows, cols, tile| {
            let w = cols.len();
            for (i, s) in rows.enumerate() {
                out[s * n_tgt + cols.start..s * n_tgt + cols.end]
                    .copy_from_slice(&tile[i * w..(i + 1) * w]);
            }
        });
        out
    }

    pub(crate) fn push_layer(&mut self, layer: MmLayer) {
        let n_tgt = self.tgt_grid.cells();
        match &mut self.storage {
            Storage::Dense(d) => {
                d.par_chunks_mut(n_tgt).enumerate().for_each(|(s, row)| {
                    for (t, v) in row.iter_mut().enumerate() {
                        *v = layer.apply(*v, s, t);
                    }
                });
            }
            Storage::Streamed { layers, .. } => layers.push(layer),
        }
    }
}

/// Materialized correlation of two maps. Fails if the dense tensor would
/// exceed `budget` bytes.
pub fn correlate_dense(
    src: &FeatureMap,
    tgt: &FeatureMap,
    budget: usize,
) -> Result<CorrelationTensor4D, CorrError> {
    check_channels(src, tgt)?;
    let (sg, tg) = (Grid::of(src), Grid::of(tgt));
    let needed = sg.cells().saturating_mul(tg.cells()).saturating_mul(4);
    if needed > budget {
        return Err(CorrError::BudgetExceeded { needed, budget });
    }
    let ops = Operands::new(Arc::new(src.clone()), Arc::new(tgt.clone()));
    let n_tgt = tg.cells();
    let mut data = vec![0.0f32; sg.cells() * n_tgt];
    if n_tgt > 0 {
        // blocks of source rows against L2-sized target tiles
        data.par_chunks_mut(n_tgt * ROW_BLOCK)
            .enumerate()
            .for_each(|(b, rows)| {
                for t0 in (0..n_tgt).step_by(TGT_TILE) {
                    let t1 = (t0 + TGT_TILE).min(n_tgt);
                    for (i, row) in rows.chunks_mut(n_tgt).enumerate() {
                        ops.raw_row(b * ROW_BLOCK + i, t0..t1, &mut row[t0..t1]);
                    }
                }
            });
    }
    Ok(CorrelationTensor4D {
        src_grid: sg,
        tgt_grid: tg,
        budget,
        storage: Storage::Dense(data),
    })
}

/// Lazy correlation evaluated in tiles of at most `budget` bytes.
pub fn correlate_streamed(
    src: Arc<FeatureMap>,
    tgt: Arc<FeatureMap>,
    budget: usize,
) -> Result<CorrelationTensor4D, CorrError> {
    check_channels(&src, &tgt)?;
    Ok(CorrelationTensor4D {
        src_grid: Grid::of(&src),
        tgt_grid: Grid::of(&tgt),
        budget,
        storage: Storage::Streamed {
            ops: Operands::new(src, tgt),
            layers: Vec::new(),
        },
    })
}

/// Dense when the tensor fits in `budget`, streamed otherwise.
pub fn correlate(
    src: &Arc<FeatureMap>,
    tgt: &Arc<FeatureMap>,
    budget: usize,
) -> Result<CorrelationTensor4D, CorrError> {
    match correlate_dense(src, tgt, budget) {
        Err(CorrError::BudgetExceeded { .. }) => {
            correlate_streamed(src.clone(), tgt.clone(), budget)
        }
        other => other,
    }
}

fn check_channels(src: &FeatureMap, tgt: &FeatureMap) -> Result<(), CorrError> {
    if src.channels != tgt.channels {
        return Err(CorrError::ChannelMismatch(src.channels, tgt.channels));
    }
    Ok(())
}

/// Exact row and column maxima; streamed tensors are swept once, tile by tile.
pub fn max_tables(t: &CorrelationTensor4D) -> MaxTables {
    let mut tables = MaxTables::zeros(t.src_grid.cells(), t.tgt_grid.cells());
    t.for_each_tile(|rows, cols, tile| {
        let w = cols.len();
        for (i, s) in rows.enumerate() {
            let row = &tile[i * w..(i + 1) * w];
            let rm = &mut tables.row_max[s];
            for (v, cm) in row.iter().zip(&mut tables.col_max[cols.clone()]) {
                *rm = rm.max(*v);
                *cm = cm.max(*v);
            }
        }
    });
    tables
}

/// Swaps the roles of source and target: `out[t][s] = in[s][t]`.
pub fn transpose(t: &CorrelationTensor4D) -> CorrelationTensor4D {
    let storage = match &t.storage {
        Storage::Dense(d) => {
            let (n_src, n_tgt) = (t.src_grid.cells(), t.tgt_grid.cells());
            let mut out = vec![0.0f32; d.len()];
            for s in 0..n_src {
                for tt in 0..n_tgt {
                    out[tt * n_src + s] = d[s * n_tgt + tt];
                }
            }
            Storage::Dense(out)
        }
        Storage::Streamed { ops, layers } => Storage::Streamed {
            ops: ops.swapped(),
            layers: layers.iter().map(MmLayer::transposed).collect(),
        },
    };
    CorrelationTensor4D {
        src_grid: t.tgt_grid,
        tgt_grid: t.src_grid,
        budget: t.budget,
        storage,
    }
}

/// The 2D slice for one source cell, over the target grid.
pub fn query_row(
    t: &CorrelationTensor4D,
    cell: (usize, usize),
) -> Result<CorrelationMap2D, CorrError> {
    let (x, y) = cell;
    let g = t.src_grid;
    if x >= g.w || y >= g.h {
        return Err(CorrError::OutOfRange {
            x,
            y,
            w: g.w,
            h: g.h,
        });
    }
    let s = y * g.w + x;
    let n_tgt = t.tgt_grid.cells();
    let data = match &t.storage {
        Storage::Dense(d) => d[s * n_tgt..(s + 1) * n_tgt].to_vec(),
        Storage::Streamed { ops, layers } => {
            let mut row = vec![0.0; n_tgt];
            ops.raw_row(s, 0..n_tgt, &mut row);
            for l in layers {
                for (k, v) in row.iter_mut().enumerate() {
                    *v = l.apply(*v, s, k);
                }
            }
            row
        }
    };
    Ok(CorrelationMap2D::new(t.tgt_grid.w, t.tgt_grid.h, data))
}
