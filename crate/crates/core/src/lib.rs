//! Dense image correspondence with a 4D correlation tensor, parameter-free
//! mutual-matching filtering and coarse-to-fine correlation re-weighting,
//! plus a homography benchmark harness.
//!
//! The pipeline, end to end:
//!
//! 1. [`imgio`] loads an image, converts it to luma and resizes it so its
//!    long side matches the working resolution (snapped to 16 px).
//! 2. [`features`] computes a fine (stride 4) and a coarse (stride 16)
//!    descriptor grid, non-negative and unit-norm per cell.
//! 3. [`corr4d`] correlates the coarse grids of the two images, either
//!    materialized or streamed under a memory budget.
//! 4. [`mmfilter`] applies mutual matching and scores each source cell.
//! 5. [`matcher`] refines the best coarse cells on the fine grid and reports
//!    matches in original image coordinates.
//!
//! [`eval`] measures mean matching accuracy against ground-truth
//! homographies and [`gtpdf`] builds keypoint probability maps.
//!
//! ```
//! use xrc::imgio::{Image, ResizeSpec};
//! use xrc::matcher::{match_pair, PipelineConfig};
//!
//! let img = Image::from_fn(128, 96, |x, y| ((x * 31 + y * 17) ^ (x * y)) as u8);
//! let cfg = PipelineConfig {
//!     resolution: ResizeSpec::new(128).unwrap(),
//!     topk: 20,
//!     ..Default::default()
//! };
//! let matches = match_pair(&img, &img, &cfg).unwrap();
//! assert!(!matches.is_empty());
//! ```

pub mod corr4d;
pub mod eval;
pub mod features;
pub mod gtpdf;
pub mod imgio;
pub mod map;
pub mod matcher;
pub mod mem;
pub mod mmfilter;
pub mod synth;

pub use corr4d::{CorrelationTensor4D, MaxTables};
pub use features::{FeatureMap, FeaturePyramid};
pub use imgio::{Image, ResizeSpec};
pub use map::CorrelationMap2D;
pub use matcher::{match_pair, Match, MatchSet, PipelineConfig};
pub use mmfilter::MMConfig;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/images.md")]
    mod images {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/correlation.md")]
    mod correlation {}
    #[doc = include_str!("../../../book/src/mutual-matching.md")]
    mod mutual_matching {}
    #[doc = include_str!("../../../book/src/reweighting.md")]
    mod reweighting {}
    #[doc = include_str!("../../../book/src/ground-truth.md")]
    mod ground_truth {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
