//! Homography benchmark harness: mean matching accuracy (MMA) curves, their
//! normalized area, HPatches-layout sequence runs, the resolution sweep and
//! the two-method bias histogram.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::imgio::{load_image, Image, ResizeSpec};
use crate::matcher::{match_pair, MatchError, MatchSet, PipelineConfig};
use crate::mem;

/// Default error thresholds: 1..=10 px.
pub const DEFAULT_THRESHOLDS: [f64; 10] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("homography is singular (|det| = {0:e})")]
    Singular(f64),
    #[error("homography must have a non-zero bottom-right entry")]
    Unnormalizable,
    #[error("point maps to infinity (w = {0:e})")]
    PointAtInfinity(f64),
    #[error("malformed homography {path}: {reason}")]
    BadHomography { path: String, reason: String },
    #[error("{dir}: expected 6 images, found {found}")]
    ImageCount { dir: String, found: usize },
    #[error("missing file {0}")]
    Missing(String),
    #[error("no sequences found in {0}")]
    NoSequences(String),
    #[error("empty resolution list")]
    NoResolutions,
    #[error("resolutions must be ascending")]
    UnsortedResolutions,
    #[error("threshold list must be non-empty and ascending")]
    BadThresholds,
    #[error("ratio lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("ratio {0} outside [0, 1]")]
    RatioRange(f64),
    #[error("malformed ratio file {path}: {reason}")]
    BadRatios { path: String, reason: String },
    #[error("tau must lie in [0, 1], got {0}")]
    TauRange(f64),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Planar projective transform, row-major, normalized so `m[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub const IDENTITY: Homography = Homography {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn new(m: [[f64; 3]; 3]) -> Result<Self, EvalError> {
        let s = m[2][2];
        if s == 0.0 || !s.is_finite() {
            return Err(EvalError::Unnormalizable);
        }
        let m = m.map(|row| row.map(|v| v / s));
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det.is_nan() || det.abs() <= 1e-12 {
            return Err(EvalError::Singular(det));
        }
        Ok(Self { m })
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
        }
    }

    /// Parses nine whitespace-separated decimals.
    pub fn parse(text: &str) -> Result<Self, String> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
            .collect::<Result<_, _>>()?;
        if vals.len() != 9 {
            return Err(format!("expected 9 values, found {}", vals.len()));
        }
        let m = [
            [vals[0], vals[1], vals[2]],
            [vals[3], vals[4], vals[5]],
            [vals[6], vals[7], vals[8]],
        ];
        Homography::new(m).map_err(|e| e.to_string())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|_| EvalError::Missing(path.display().to_string()))?;
        Self::parse(&text).map_err(|reason| EvalError::BadHomography {
            path: path.display().to_string(),
            reason,
        })
    }
}

pub fn apply_homography(h: &Homography, p: (f64, f64)) -> Result<(f64, f64), EvalError> {
    let m = &h.m;
    let w = m[2][0] * p.0 + m[2][1] * p.1 + m[2][2];
    if w.is_nan() || w.abs() <= 1e-12 {
        return Err(EvalError::PointAtInfinity(w));
    }
    Ok((
        (m[0][0] * p.0 + m[0][1] * p.1 + m[0][2]) / w,
        (m[1][0] * p.0 + m[1][1] * p.1 + m[1][2]) / w,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Illumination,
    Viewpoint,
    Overall,
}

impl Category {
    /// HPatches naming: `i_*` sequences vary illumination, `v_*` viewpoint.
    pub fn from_sequence_name(name: &str) -> Self {
        if name.starts_with("i_") {
            Category::Illumination
        } else if name.starts_with("v_") {
            Category::Viewpoint
        } else {
            Category::Overall
        }
    }
}

/// MMA curve for one pair or an aggregate of pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub mma: Vec<f64>,
    pub auc: f64,
    pub n_matches: usize,
    pub category: Category,
    /// False when computed from zero matches; `mma` is then all zero.
    pub defined: bool,
}

impl EvalReport {
    pub fn mma_at(&self, t: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&x| x == t)
            .map(|i| self.mma[i])
    }
}

/// Trapezoidal area under an MMA curve divided by the threshold span, so a
/// constant curve `c` has area `c`.
pub fn auc(thresholds: &[f64], mma: &[f64]) -> f64 {
    match thresholds.len() {
        0 => 0.0,
        1 => mma[0],
        n => {
            let mut area = 0.0;
            for i in 1..n {
                area += 0.5 * (mma[i] + mma[i - 1]) * (thresholds[i] - thresholds[i - 1]);
            }
            area / (thresholds[n - 1] - thresholds[0])
        }
    }
}

fn check_thresholds(t: &[f64]) -> Result<(), EvalError> {
    if t.is_empty() || t.iter().any(|v| v.is_nan()) || t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EvalError::BadThresholds);
    }
    Ok(())
}

/// A source point and its claimed target point.
pub type Correspondence = ((f64, f64), (f64, f64));

/// Fraction of correspondences whose target lies within `t` px of the
/// homography-mapped source, for each threshold `t`.
pub fn mma_points(
    points: &[Correspondence],
    h: &Homography,
    thresholds: &[f64],
    category: Category,
) -> Result<EvalReport, EvalError> {
    check_thresholds(thresholds)?;
    let mut errors = Vec::with_capacity(points.len());
    for &(src, tgt) in points {
        let p = apply_homography(h, src)?;
        errors.push(((p.0 - tgt.0).powi(2) + (p.1 - tgt.1).powi(2)).sqrt());
    }
    let n = errors.len();
    let mma: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            if n == 0 {
                0.0
            } else {
                errors.iter().filter(|&&e| e <= t).count() as f64 / n as f64
            }
        })
        .collect();
    Ok(EvalReport {
        auc: auc(thresholds, &mma),
        thresholds: thresholds.to_vec(),
        mma,
        n_matches: n,
        category,
        defined: n > 0,
    })
}

pub fn mma(
    matches: &MatchSet,
    h: &Homography,
    thresholds: &[f64],
    category: Category,
) -> Result<EvalReport, EvalError> {
    let points: Vec<_> = matches
        .matches
        .iter()
        .map(|m| (m.src_xy, m.tgt_xy))
        .collect();
    mma_points(&points, h, thresholds, category)
}

/// Pointwise mean of MMA curves. Undefined reports (no matches) count as
/// zero accuracy. Returns `None` for an empty input.
pub fn aggregate(reports: &[&EvalReport], category: Category) -> Option<EvalReport> {
    let first = reports.first()?;
    let k = first.thresholds.len();
    let mut mma = vec![0.0; k];
    for r in reports {
        assert_eq!(
            r.thresholds, first.thresholds,
            "aggregating mismatched thresholds"
        );
        for (acc, v) in mma.iter_mut().zip(&r.mma) {
            *acc += v;
        }
    }
    for v in &mut mma {
        *v /= reports.len() as f64;
    }
    Some(EvalReport {
        auc: auc(&first.thresholds, &mma),
        thresholds: first.thresholds.clone(),
        mma,
        n_matches: reports.iter().map(|r| r.n_matches).sum(),
        category,
        defined: reports.iter().any(|r| r.defined),
    })
}

/// One image pair with its ground-truth homography (source -> target).
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub name: String,
    pub src: Image,
    pub tgt: Image,
    pub h: Homography,
    pub category: Category,
}

fn find_image(dir: &Path, stem: usize) -> Option<PathBuf> {
    ["ppm", "pgm", "png"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads an HPatches sequence: image 1 against images 2..=6.
pub fn load_sequence(seq_dir: impl AsRef<Path>) -> Result<Vec<EvalPair>, EvalError> {
    let dir = seq_dir.as_ref();
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let images: Vec<Option<PathBuf>> = (1..=6).map(|i| find_image(dir, i)).collect();
    let found = images.iter().flatten().count();
    if found != 6 {
        return Err(EvalError::ImageCount {
            dir: dir.display().to_string(),
            found,
        });
    }
    let images: Vec<PathBuf> = images.into_iter().flatten().collect();
    let src = load_image(&images[0]).map_err(MatchError::from)?;
    let category = Category::from_sequence_name(&name);
    let mut pairs = Vec::with_capacity(5);
    for (k, path) in images.iter().enumerate().skip(1) {
        let h = Homography::load(dir.join(format!("H_1_{}", k + 1)))?;
        pairs.push(EvalPair {
            name: format!("{name}/1-{}", k + 1),
            src: src.clone(),
            tgt: load_image(path).map_err(MatchError::from)?,
            h,
            category,
        });
    }
    Ok(pairs)
}

/// Sequence directories of a dataset root, sorted by name.
pub fn list_sequences(root: impl AsRef<Path>) -> Result<Vec<PathBuf>, EvalError> {
    let root = root.as_ref();
    let mut seqs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|_| EvalError::NoSequences(root.display().to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    seqs.sort();
    if seqs.is_empty() {
        return Err(EvalError::NoSequences(root.display().to_string()));
    }
    Ok(seqs)
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<EvalPair>, EvalError> {
    let mut pairs = Vec::new();
    for seq in list_sequences(root)? {
        pairs.extend(load_sequence(seq)?);
    }
    Ok(pairs)
}

pub fn evaluate_pair(
    pair: &EvalPair,
    cfg: &PipelineConfig,
    thresholds: &[f64],
) -> Result<EvalReport, EvalError> {
    let matches = match_pair(&pair.src, &pair.tgt, cfg)?;
    mma(&matches, &pair.h, thresholds, pair.category)
}

/// Five pairwise reports for one sequence directory.
pub fn run_sequence(
    seq_dir: impl AsRef<Path>,
    cfg: &PipelineConfig,
    thresholds: &[f64],
) -> Result<Vec<EvalReport>, EvalError> {
    load_sequence(seq_dir)?
        .iter()
        .map(|p| evaluate_pair(p, cfg, thresholds))
        .collect()
}

/// Per-pair reports plus the three category aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetReport {
    pub pairs: Vec<(String, EvalReport)>,
    pub illumination: Option<EvalReport>,
    pub viewpoint: Option<EvalReport>,
    pub overall: EvalReport,
}

impl DatasetReport {
    pub fn from_pairs(pairs: Vec<(String, EvalReport)>) -> Option<Self> {
        let of = |c: Category| -> Vec<&EvalReport> {
            pairs
                .iter()
                .map(|(_, r)| r)
                .filter(|r| r.category == c)
                .collect()
        };
        let illumination = aggregate(&of(Category::Illumination), Category::Illumination);
        let viewpoint = aggregate(&of(Category::Viewpoint), Category::Viewpoint);
        let all: Vec<&EvalReport> = pairs.iter().map(|(_, r)| r).collect();
        let overall = aggregate(&all, Category::Overall)?;
        Some(Self {
            pairs,
            illumination,
            viewpoint,
            overall,
        })
    }

    /// `threshold,mma_illum,mma_view,mma_all`, one row per threshold.
    pub fn mma_csv(&self) -> String {
        let mut out = String::from("threshold,mma_illum,mma_view,mma_all\n");
        for (i, t) in self.overall.thresholds.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                t,
                fmt_opt(self.illumination.as_ref().map(|r| r.mma[i])),
                fmt_opt(self.viewpoint.as_ref().map(|r| r.mma[i])),
                fmt_opt(Some(self.overall.mma[i])),
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "auc_illum,{}\nauc_view,{}\nauc_all,{}\n",
            fmt_opt(self.illumination.as_ref().map(|r| r.auc)),
            fmt_opt(self.viewpoint.as_ref().map(|r| r.auc)),
            fmt_opt(Some(self.overall.auc)),
        )
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "nan".into(),
    }
}

pub fn evaluate_pairs(
    pairs: &[EvalPair],
    cfg: &PipelineConfig,
    thresholds: &[f64],
) -> Result<DatasetReport, EvalError> {
    check_thresholds(thresholds)?;
    // Pairs run one after another so the tensor memory budget holds for the
    // whole process; each pair is parallel internally.
    let reports = pairs
        .iter()
        .map(|p| Ok((p.name.clone(), evaluate_pair(p, cfg, thresholds)?)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    DatasetReport::from_pairs(reports).ok_or_else(|| EvalError::NoSequences("<pairs>".into()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub resolution: u32,
    pub auc_illum: Option<f64>,
    pub auc_view: Option<f64>,
    pub auc_all: f64,
    pub wall_s: f64,
    pub peak_mem_mb: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub const HEADER: &'static str = "resolution,auc_illum,auc_view,auc_all,wall_s,peak_mem_mb";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.3},{:.1}",
                r.resolution,
                fmt_opt(r.auc_illum),
                fmt_opt(r.auc_view),
                r.auc_all,
                r.wall_s,
                r.peak_mem_mb
            );
        }
        out
    }
}

/// Evaluates every pair at each resolution. Wall time and peak heap are
/// measured per row.
pub fn resolution_sweep(
    pairs: &[EvalPair],
    resolutions: &[u32],
    cfg: &PipelineConfig,
    thresholds: &[f64],
) -> Result<SweepTable, EvalError> {
    if resolutions.is_empty() {
        return Err(EvalError::NoResolutions);
    }
    if resolutions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EvalError::UnsortedResolutions);
    }
    let mut table = SweepTable::default();
    for &res in resolutions {
        let cfg = PipelineConfig {
            resolution: ResizeSpec::new(res).map_err(MatchError::from)?,
            ..*cfg
        };
        mem::reset_peak();
        let start = Instant::now();
        let report = evaluate_pairs(pairs, &cfg, thresholds)?;
        let wall_s = start.elapsed().as_secs_f64();
        table.rows.push(SweepRow {
            resolution: res,
            auc_illum: report.illumination.map(|r| r.auc),
            auc_view: report.viewpoint.map(|r| r.auc),
            auc_all: report.overall.auc,
            wall_s,
            peak_mem_mb: mem::peak_bytes() as f64 / (1024.0 * 1024.0),
        });
    }
    Ok(table)
}

/// Counts of pairs where method `a` is correct on more than `tau_pos` of its
/// matches while method `b` is correct on fewer than `tau_neg`, for
/// `tau_neg` in `{0, 0.1 tau_pos, ..., tau_pos}`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasHistogram {
    pub tau_pos: f64,
    pub tau_neg: Vec<f64>,
    pub counts: Vec<usize>,
}

impl BiasHistogram {
    pub fn to_text(&self) -> String {
        let mut out = format!("# tau_pos {}\n# tau_neg count\n", self.tau_pos);
        for (t, c) in self.tau_neg.iter().zip(&self.counts) {
            let _ = writeln!(out, "{t:.4}\t{c}");
        }
        out
    }
}

fn check_ratios(a: &[f64], b: &[f64]) -> Result<(), EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if let Some(&r) = a.iter().chain(b).find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(EvalError::RatioRange(r));
    }
    Ok(())
}

/// Number of pairs with `a_i > tau_pos` and `b_i < tau_neg`.
pub fn bias_count(a: &[f64], b: &[f64], tau_pos: f64, tau_neg: f64) -> Result<usize, EvalError> {
    check_ratios(a, b)?;
    Ok(a.iter()
        .zip(b)
        .filter(|&(&pa, &pb)| pa > tau_pos && pb < tau_neg)
        .count())
}

pub fn bias_histogram(a: &[f64], b: &[f64], tau_pos: f64) -> Result<BiasHistogram, EvalError> {
    check_ratios(a, b)?;
    if !(0.0..=1.0).contains(&tau_pos) {
        return Err(EvalError::TauRange(tau_pos));
    }
    let tau_neg: Vec<f64> = (0..=10).map(|i| tau_pos * i as f64 / 10.0).collect();
    let counts = tau_neg
        .iter()
        .map(|&t| bias_count(a, b, tau_pos, t))
        .collect::<Result<_, _>>()?;
    Ok(BiasHistogram {
        tau_pos,
        tau_neg,
        counts,
    })
}

/// Whitespace-separated ratios from a text file.
pub fn read_ratios(path: impl AsRef<Path>) -> Result<Vec<f64>, EvalError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|_| EvalError::Missing(path.display().to_string()))?;
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|e| EvalError::BadRatios {
                path: path.display().to_string(),
                reason: format!("{t:?}: {e}"),
            })
        })
        .collect()
}
