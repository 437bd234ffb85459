//! Coarse-to-fine match extraction.
//!
//! Coarse cells are ranked by their mutual-matching reliability score. For
//! each of the top `k` cells, the filtered coarse correlation map is
//! bilinearly upsampled to the fine target grid and multiplied into the fine
//! correlation maps of the 16 fine cells inside the coarse cell; the best
//! (fine source, fine target) pair becomes the match.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::corr4d::{self, correlation, query_row, CorrError, CorrelationTensor4D, DEFAULT_BUDGET};
use crate::features::{compute_pyramid, FeatureError, FeatureMap, FeaturePyramid};
use crate::imgio::{resize_bilinear, to_grayscale, Image, ImageError, ResizeSpec, Scale};
use crate::map::CorrelationMap2D;
use crate::mmfilter::{mm_filter, reliability_scores, MMConfig};

/// Fine cells per coarse cell along each axis.
pub const FACTOR: usize = 4;
pub const DEFAULT_TOPK: usize = 2000;
pub const DEFAULT_RESOLUTION: u32 = 1600;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Corr(#[from] CorrError),
    #[error("fine cell ({x},{y}) outside {w}x{h} grid")]
    CellOutOfRange {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
    },
    #[error("coarse map is {0}x{1}, expected {2}x{3}")]
    MapShape(usize, usize, usize, usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed match file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub resolution: ResizeSpec,
    pub mm: MMConfig,
    pub topk: usize,
    pub memory_budget: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            resolution: ResizeSpec {
                target_long_side: DEFAULT_RESOLUTION,
            },
            mm: MMConfig::default(),
            topk: DEFAULT_TOPK,
            memory_budget: DEFAULT_BUDGET,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        ResizeSpec::new(self.resolution.target_long_side)?;
        MMConfig::new(self.mm.epsilon, self.mm.passes).map_err(MatchError::Config)?;
        if self.topk == 0 {
            return Err(MatchError::Config("topk must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub src_xy: (f64, f64),
    pub tgt_xy: (f64, f64),
    /// Re-weighted fine correlation of the selected pair.
    pub score: f32,
    pub coarse_cell: (usize, usize),
    pub fine_src: (usize, usize),
    pub fine_tgt: (usize, usize),
}

/// Matches ordered by descending score, ties by `(y, x, y', x')` of the fine
/// cells.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    pub k: usize,
}

impl MatchSet {
    pub fn new(mut matches: Vec<Match>, k: usize) -> Self {
        matches.sort_by(|a, b| {
            b.score.total_cmp(&a.score).then_with(|| {
                (a.fine_src.1, a.fine_src.0, a.fine_tgt.1, a.fine_tgt.0).cmp(&(
                    b.fine_src.1,
                    b.fine_src.0,
                    b.fine_tgt.1,
                    b.fine_tgt.0,
                ))
            })
        });
        Self { matches, k }
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Tab-separated text with a `# src_x src_y tgt_x tgt_y score` header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# src_x src_y tgt_x tgt_y score\n");
        for m in &self.matches {
            let _ = writeln!(
                out,
                "{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                m.src_xy.0, m.src_xy.1, m.tgt_xy.0, m.tgt_xy.1, m.score
            );
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<(), MatchError> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

/// `(src_xy, tgt_xy, score)` as read back from a match TSV.
pub type TsvRow = ((f64, f64), (f64, f64), f32);

/// Point correspondences read back from a match TSV.
pub fn read_tsv(reader: impl BufRead) -> Result<Vec<TsvRow>, MatchError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| MatchError::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
        if vals.len() != 5 {
            return Err(MatchError::Parse {
                line: i + 1,
                reason: format!("expected 5 fields, found {}", vals.len()),
            });
        }
        out.push(((vals[0], vals[1]), (vals[2], vals[3]), vals[4] as f32));
    }
    Ok(out)
}

/// Position of fine cell `i` in coarse-cell coordinates, with cell centers
/// aligned: fine center `4i + 1.5` px, coarse center `16j + 7.5` px.
#[inline]
fn fine_to_coarse(i: usize) -> f64 {
    (i as f64 - 1.5) / FACTOR as f64
}

/// Bilinear x4 upsampling of a coarse map onto the fine grid, replicating
/// edge values beyond the outermost coarse centers.
pub fn upsample_coarse_map(m: &CorrelationMap2D) -> CorrelationMap2D {
    let (w, h) = (m.width * FACTOR, m.height * FACTOR);
    let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
        (0..n_out)
            .map(|i| {
                let u = fine_to_coarse(i).clamp(0.0, (n_in - 1) as f64);
                let i0 = u.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (u - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(w, m.width);
    let ys = taps(h, m.height);
    let mut data = Vec::with_capacity(w * h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = m.get(x0, y0) * (1.0 - fx) + m.get(x1, y0) * fx;
            let bottom = m.get(x0, y1) * (1.0 - fx) + m.get(x1, y1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    CorrelationMap2D::new(w, h, data)
}

/// Raw fine correlation map of one fine source cell against every fine
/// target cell.
pub fn fine_correlation_map(
    fine_src: &FeatureMap,
    fine_tgt: &FeatureMap,
    cell: (usize, usize),
) -> CorrelationMap2D {
    let q = fine_src.cell(cell.0, cell.1);
    let data = (0..fine_tgt.cells())
        .map(|t| correlation(q, fine_tgt.cell_at(t)))
        .collect();
    CorrelationMap2D::new(fine_tgt.grid_w, fine_tgt.grid_h, data)
}

fn check_refine_inputs(
    fine_src: &FeatureMap,
    fine_tgt: &FeatureMap,
    coarse_map: &CorrelationMap2D,
    cell: (usize, usize),
) -> Result<(), MatchError> {
    if cell.0 >= fine_src.grid_w || cell.1 >= fine_src.grid_h {
        return Err(MatchError::CellOutOfRange {
            x: cell.0,
            y: cell.1,
            w: fine_src.grid_w,
            h: fine_src.grid_h,
        });
    }
    if coarse_map.width * FACTOR != fine_tgt.grid_w || coarse_map.height * FACTOR != fine_tgt.grid_h
    {
        return Err(MatchError::MapShape(
            coarse_map.width,
            coarse_map.height,
            fine_tgt.grid_w / FACTOR,
            fine_tgt.grid_h / FACTOR,
        ));
    }
    Ok(())
}

/// Re-weighted fine map `U(coarse) * C_fine` for one fine source cell.
pub fn reweighted_map(
    fine_src: &FeatureMap,
    fine_tgt: &FeatureMap,
    coarse_map: &CorrelationMap2D,
    cell: (usize, usize),
) -> Result<CorrelationMap2D, MatchError> {
    check_refine_inputs(fine_src, fine_tgt, coarse_map, cell)?;
    let up = upsample_coarse_map(coarse_map);
    let mut fine = fine_correlation_map(fine_src, fine_tgt, cell);
    for (f, u) in fine.data.iter_mut().zip(&up.data) {
        *f *= *u;
    }
    Ok(fine)
}

/// Best fine target cell for one fine source cell under coarse guidance.
/// Ties resolve to the lexicographically smallest `(y', x')`.
pub fn refine_query(
    fine_src: &FeatureMap,
    fine_tgt: &FeatureMap,
    coarse_map: &CorrelationMap2D,
    cell: (usize, usize),
) -> Result<((usize, usize), f32), MatchError> {
    Ok(reweighted_map(fine_src, fine_tgt, coarse_map, cell)?.argmax())
}

/// Refined pair for a whole coarse source cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Refined {
    pub fine_src: (usize, usize),
    pub fine_tgt: (usize, usize),
    pub score: f32,
}

/// Runs [`refine_query`] for the 16 fine cells inside `coarse_cell` and keeps
/// the best pair (ties: smallest `(y, x, y', x')`).
///
/// Equivalent to the exhaustive search, but target blocks are visited in
/// decreasing order of their upsampled-weight bound and the scan stops once
/// the bound falls below the best score found: fine correlations never
/// exceed 1, so no remaining pair can win.
pub fn refine_coarse_cell(
    fine_src: &FeatureMap,
    fine_tgt: &FeatureMap,
    coarse_map: &CorrelationMap2D,
    coarse_cell: (usize, usize),
) -> Result<Refined, MatchError> {
    let origin = (coarse_cell.0 * FACTOR, coarse_cell.1 * FACTOR);
    check_refine_inputs(fine_src, fine_tgt, coarse_map, origin)?;
    let up = upsample_coarse_map(coarse_map);
    let fw = fine_tgt.grid_w;

    let mut blocks: Vec<(usize, f32)> = (0..coarse_map.width * coarse_map.height)
        .map(|b| {
            let (bx, by) = (b % coarse_map.width, b / coarse_map.width);
            let mut bound = 0.0f32;
            for y in by * FACTOR..(by + 1) * FACTOR {
                for x in bx * FACTOR..(bx + 1) * FACTOR {
                    bound = bound.max(up.data[y * fw + x]);
                }
            }
            (b, bound)
        })
        .collect();
    blocks.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let queries: Vec<(usize, usize)> = (0..FACTOR * FACTOR)
        .map(|i| (origin.0 + i % FACTOR, origin.1 + i / FACTOR))
        .filter(|&(x, y)| x < fine_src.grid_w && y < fine_src.grid_h)
        .collect();

    let mut best: Option<Refined> = None;
    let key = |r: &Refined| (r.fine_src.1, r.fine_src.0, r.fine_tgt.1, r.fine_tgt.0);
    for (b, bound) in blocks {
        if let Some(cur) = &best {
            if bound < cur.score {
                break;
            }
        }
        let (bx, by) = (b % coarse_map.width, b / coarse_map.width);
        for &q in &queries {
            let qv = fine_src.cell(q.0, q.1);
            for y in by * FACTOR..(by + 1) * FACTOR {
                for x in bx * FACTOR..(bx + 1) * FACTOR {
                    let t = y * fw + x;
                    let score = correlation(qv, fine_tgt.cell_at(t)) * up.data[t];
                    let cand = Refined {
                        fine_src: q,
                        fine_tgt: (x, y),
                        score,
                    };
                    let better = match &best {
                        None => true,
                        Some(cur) => {
                            score > cur.score || (score == cur.score && key(&cand) < key(cur))
                        }
                    };
                    if better {
                        best = Some(cand);
                    }
                }
            }
        }
    }
    Ok(best.expect("coarse grid has at least one cell"))
}

/// Filtered coarse tensor of a pyramid pair.
pub fn filtered_tensor(
    src: &FeaturePyramid,
    tgt: &FeaturePyramid,
    cfg: &PipelineConfig,
) -> Result<CorrelationTensor4D, MatchError> {
    let t = corr4d::correlate(
        &Arc::new(src.coarse.clone()),
        &Arc::new(tgt.coarse.clone()),
        cfg.memory_budget,
    )?;
    Ok(mm_filter(t, &cfg.mm))
}

/// Matches between two pyramids in the pixel frame the pyramids were
/// computed on. `src_scale`/`tgt_scale` map those frames to the reported
/// coordinates.
pub fn match_pyramids(
    src: &FeaturePyramid,
    tgt: &FeaturePyramid,
    cfg: &PipelineConfig,
    src_scale: Scale,
    tgt_scale: Scale,
    src_dims: (u32, u32),
    tgt_dims: (u32, u32),
) -> Result<MatchSet, MatchError> {
    cfg.validate()?;
    src.validate()?;
    tgt.validate()?;
    let filtered = filtered_tensor(src, tgt, cfg)?;
    let scores = reliability_scores(&filtered);
    let candidates = scores.top_k(cfg.topk);

    let refined: Vec<Result<Refined, MatchError>> = candidates
        .par_iter()
        .map(|&(cell, _)| {
            let coarse_map = query_row(&filtered, cell)?;
            refine_coarse_cell(&src.fine, &tgt.fine, &coarse_map, cell)
        })
        .collect();

    let (sg, tg) = (src.fine.geometry(), tgt.fine.geometry());
    let clamp = |p: (f64, f64), dims: (u32, u32)| {
        (
            p.0.clamp(0.0, (dims.0 - 1) as f64),
            p.1.clamp(0.0, (dims.1 - 1) as f64),
        )
    };
    let mut matches = Vec::with_capacity(refined.len());
    for r in refined {
        let r = r?;
        let s = src_scale.to_original(sg.cell_center(r.fine_src.0, r.fine_src.1));
        let t = tgt_scale.to_original(tg.cell_center(r.fine_tgt.0, r.fine_tgt.1));
        matches.push(Match {
            src_xy: clamp(s, src_dims),
            tgt_xy: clamp(t, tgt_dims),
            score: r.score,
            coarse_cell: (r.fine_src.0 / FACTOR, r.fine_src.1 / FACTOR),
            fine_src: r.fine_src,
            fine_tgt: r.fine_tgt,
        });
    }
    Ok(MatchSet::new(matches, cfg.topk))
}

/// Grayscale, resize to the configured resolution, and compute the pyramid.
pub fn prepare(img: &Image, resolution: ResizeSpec) -> Result<(FeaturePyramid, Scale), MatchError> {
    let gray = to_grayscale(img);
    let (resized, scale) = resize_bilinear(&gray, resolution)?;
    Ok((compute_pyramid(&resized)?, scale))
}

/// Full pipeline; match coordinates are in the original images' pixels.
pub fn match_pair(
    src_img: &Image,
    tgt_img: &Image,
    cfg: &PipelineConfig,
) -> Result<MatchSet, MatchError> {
    cfg.validate()?;
    let (src, src_scale) = prepare(src_img, cfg.resolution)?;
    let (tgt, tgt_scale) = prepare(tgt_img, cfg.resolution)?;
    match_pyramids(
        &src,
        &tgt,
        cfg,
        src_scale,
        tgt_scale,
        (src_img.width, src_img.height),
        (tgt_img.width, tgt_img.height),
    )
}

/// Which intermediate correlation map to visualize for a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Coarse map from the raw tensor.
    Raw,
    /// Coarse map after the first mutual-matching pass.
    Mm1,
    /// Coarse map after the second mutual-matching pass.
    Mm2,
    /// Re-weighted fine map after all configured passes.
    Fine,
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Stage::Raw),
            "mm1" => Ok(Stage::Mm1),
            "mm2" => Ok(Stage::Mm2),
            "fine" => Ok(Stage::Fine),
            other => Err(format!("unknown stage {other:?} (raw|mm1|mm2|fine)")),
        }
    }
}

/// Correlation map of the source pixel `query` (resized frame) at `stage`.
pub fn stage_map(
    src: &FeaturePyramid,
    tgt: &FeaturePyramid,
    query: (f64, f64),
    stage: Stage,
    cfg: &PipelineConfig,
) -> Result<CorrelationMap2D, MatchError> {
    let coarse_cell = src.coarse.geometry().cell_of(query);
    let passes = match stage {
        Stage::Raw => 0,
        Stage::Mm1 => 1,
        Stage::Mm2 => 2,
        Stage::Fine => cfg.mm.passes,
    };
    let t = corr4d::correlate(
        &Arc::new(src.coarse.clone()),
        &Arc::new(tgt.coarse.clone()),
        cfg.memory_budget,
    )?;
    let t = mm_filter(
        t,
        &MMConfig {
            epsilon: cfg.mm.epsilon,
            passes,
        },
    );
    let coarse = query_row(&t, coarse_cell)?;
    if stage != Stage::Fine {
        return Ok(coarse);
    }
    let fine_cell = src.fine.geometry().cell_of(query);
    reweighted_map(&src.fine, &tgt.fine, &coarse, fine_cell)
}
