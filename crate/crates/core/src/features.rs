//! Dense fine/coarse descriptor grids and the XFM1 feature file format.
//!
//! The built-in descriptor is a small gradient-orientation histogram: Sobel
//! gradients are soft-binned into 8 signed orientations, pooled over a grid of
//! quadrants around each cell center, clamped at zero and L2-normalized.
//!
//! | map    | stride | window | quadrants | channels |
//! |--------|--------|--------|-----------|----------|
//! | fine   | 4      | 8x8    | 2x2 (4x4) | 32       |
//! | coarse | 16     | 32x32  | 4x4 (8x8) | 128      |

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::imgio::{to_grayscale, Image};

pub const FINE_STRIDE: u32 = 4;
pub const COARSE_STRIDE: u32 = 16;
pub const ORIENTATIONS: usize = 8;
pub const FINE_CHANNELS: usize = 4 * ORIENTATIONS;
pub const COARSE_CHANNELS: usize = 16 * ORIENTATIONS;

/// Cells whose pooled histogram norm is below this stay exact zero vectors.
const DEGENERATE_NORM: f64 = 1e-9;
/// Read-side tolerance on per-cell unit norm.
const NORM_TOLERANCE: f64 = 1e-3;

const XFM_MAGIC: &[u8; 4] = b"XFM1";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("image {0}x{1} is smaller than one coarse cell")]
    ImageTooSmall(u32, u32),
    #[error("image {0}x{1} is not a multiple of the coarse stride")]
    Misaligned(u32, u32),
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0:?}")]
    UnsupportedVersion(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("pyramid ratio violation: {0}")]
    RatioViolation(String),
    #[error("non-finite value at {map} cell ({x},{y})")]
    NonFinite {
        map: &'static str,
        x: usize,
        y: usize,
    },
    #[error("negative value at {map} cell ({x},{y})")]
    Negative {
        map: &'static str,
        x: usize,
        y: usize,
    },
    #[error("norm violation at {map} cell ({x},{y}): |f| = {norm}")]
    NormViolation {
        map: &'static str,
        x: usize,
        y: usize,
        norm: f64,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Placement of a cell grid over an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridGeometry {
    pub grid_w: usize,
    pub grid_h: usize,
    pub stride: u32,
}

impl GridGeometry {
    /// Pixel coordinate of the center of cell 0: `stride / 2 - 0.5`.
    pub fn offset(&self) -> f64 {
        self.stride as f64 / 2.0 - 0.5
    }

    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn cell_center(&self, x: usize, y: usize) -> (f64, f64) {
        let s = self.stride as f64;
        (x as f64 * s + self.offset(), y as f64 * s + self.offset())
    }

    /// Continuous cell coordinates of a pixel position.
    pub fn to_cell_coords(&self, p: (f64, f64)) -> (f64, f64) {
        let s = self.stride as f64;
        ((p.0 - self.offset()) / s, (p.1 - self.offset()) / s)
    }

    /// Cell containing pixel `p`, clamped to the grid.
    pub fn cell_of(&self, p: (f64, f64)) -> (usize, usize) {
        let s = self.stride as f64;
        let cx = (p.0 / s).floor().clamp(0.0, (self.grid_w - 1) as f64);
        let cy = (p.1 / s).floor().clamp(0.0, (self.grid_h - 1) as f64);
        (cx as usize, cy as usize)
    }
}

/// A dense descriptor grid, layout `[cell_y][cell_x][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub stride: u32,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, grid_w: usize, grid_h: usize, stride: u32) -> Self {
        Self {
            channels,
            grid_w,
            grid_h,
            stride,
            data: vec![0.0; channels * grid_w * grid_h],
        }
    }

    /// Builds a map from raw data, enforcing non-negativity and unit (or zero)
    /// norm per cell.
    pub fn from_data(
        channels: usize,
        grid_w: usize,
        grid_h: usize,
        stride: u32,
        data: Vec<f32>,
    ) -> Result<Self, FeatureError> {
        if data.len() != channels * grid_w * grid_h {
            return Err(FeatureError::DimMismatch(format!(
                "{} values for {channels}x{grid_w}x{grid_h}",
                data.len()
            )));
        }
        let map = Self {
            channels,
            grid_w,
            grid_h,
            stride,
            data,
        };
        map.validate("map")?;
        Ok(map)
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            grid_w: self.grid_w,
            grid_h: self.grid_h,
            stride: self.stride,
        }
    }

    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        self.cell_at(y * self.grid_w + x)
    }

    #[inline]
    pub fn cell_at(&self, index: usize) -> &[f32] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// Channel-major copy (`[channel][cell]`), the layout the correlation
    /// kernels stream over.
    pub fn channel_major(&self) -> Vec<f32> {
        let n = self.cells();
        let mut out = vec![0.0; n * self.channels];
        for (i, cell) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in cell.iter().enumerate() {
                out[c * n + i] = v;
            }
        }
        out
    }

    fn validate(&self, name: &'static str) -> Result<(), FeatureError> {
        for (i, cell) in self.data.chunks_exact(self.channels.max(1)).enumerate() {
            let (x, y) = (i % self.grid_w, i / self.grid_w);
            let mut sq = 0.0f64;
            for &v in cell {
                if !v.is_finite() {
                    return Err(FeatureError::NonFinite { map: name, x, y });
                }
                if v < 0.0 {
                    return Err(FeatureError::Negative { map: name, x, y });
                }
                sq += v as f64 * v as f64;
            }
            let norm = sq.sqrt();
            if norm != 0.0 && (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(FeatureError::NormViolation {
                    map: name,
                    x,
                    y,
                    norm,
                });
            }
        }
        Ok(())
    }
}

/// Fine (stride 4) and coarse (stride 16) maps of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub fine: FeatureMap,
    pub coarse: FeatureMap,
    /// Dimensions of the image the grids were computed on.
    pub width: u32,
    pub height: u32,
}

impl FeaturePyramid {
    /// Checks the structural invariants shared by computed and ingested
    /// pyramids.
    pub fn validate(&self) -> Result<(), FeatureError> {
        let (f, c) = (&self.fine, &self.coarse);
        if f.stride == 0 || c.stride != f.stride * 4 {
            return Err(FeatureError::RatioViolation(format!(
                "strides {} / {}",
                f.stride, c.stride
            )));
        }
        if c.grid_w * 4 != f.grid_w || c.grid_h * 4 != f.grid_h {
            return Err(FeatureError::RatioViolation(format!(
                "coarse grid {}x{} vs fine grid {}x{}",
                c.grid_w, c.grid_h, f.grid_w, f.grid_h
            )));
        }
        for (name, m) in [("fine", f), ("coarse", c)] {
            let s = m.stride as usize;
            let (w, h) = (self.width as usize, self.height as usize);
            if m.grid_w == 0
                || m.grid_h == 0
                || m.grid_w * s > w
                || w >= (m.grid_w + 1) * s
                || m.grid_h * s > h
                || h >= (m.grid_h + 1) * s
            {
                return Err(FeatureError::DimMismatch(format!(
                    "{name} grid {}x{} at stride {s} does not cover {w}x{h}",
                    m.grid_w, m.grid_h
                )));
            }
            if m.data.len() != m.channels * m.cells() {
                return Err(FeatureError::DimMismatch(format!("{name} data length")));
            }
        }
        f.validate("fine")?;
        c.validate("coarse")
    }
}

/// Computes the built-in descriptor pyramid. Color input is converted to luma.
pub fn compute_pyramid(img: &Image) -> Result<FeaturePyramid, FeatureError> {
    let (w, h) = (img.width, img.height);
    if w < COARSE_STRIDE || h < COARSE_STRIDE {
        return Err(FeatureError::ImageTooSmall(w, h));
    }
    if w % COARSE_STRIDE != 0 || h % COARSE_STRIDE != 0 {
        return Err(FeatureError::Misaligned(w, h));
    }
    let gray;
    let img = if img.channels == 1 {
        img
    } else {
        gray = to_grayscale(img);
        &gray
    };
    let hist = orientation_histograms(img);
    let (w, h) = (w as usize, h as usize);

    let fine = pool(&hist, w, h, FINE_STRIDE as usize, 4, 2);
    let coarse = pool(&hist, w, h, COARSE_STRIDE as usize, 8, 4);
    Ok(FeaturePyramid {
        fine,
        coarse,
        width: img.width,
        height: img.height,
    })
}

/// Per-pixel soft-binned gradient magnitudes, layout `[y][x][bin]`.
fn orientation_histograms(img: &Image) -> Vec<f32> {
    let (w, h) = (img.width as usize, img.height as usize);
    let px = |x: isize, y: isize| -> i32 {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        img.data[y * w + x] as i32
    };
    let bin_width = std::f32::consts::PI / 4.0;
    let mut out = vec![0.0f32; w * h * ORIENTATIONS];
    out.par_chunks_mut(w * ORIENTATIONS)
        .enumerate()
        .for_each(|(y, row)| {
            let y = y as isize;
            for x in 0..w as isize {
                let gx = px(x + 1, y - 1) + 2 * px(x + 1, y) + px(x + 1, y + 1)
                    - px(x - 1, y - 1)
                    - 2 * px(x - 1, y)
                    - px(x - 1, y + 1);
                let gy = px(x - 1, y + 1) + 2 * px(x, y + 1) + px(x + 1, y + 1)
                    - px(x - 1, y - 1)
                    - 2 * px(x, y - 1)
                    - px(x + 1, y - 1);
                if gx == 0 && gy == 0 {
                    continue;
                }
                let mag = ((gx * gx + gy * gy) as f32).sqrt();
                let mut pos = (gy as f32).atan2(gx as f32) / bin_width;
                if pos < 0.0 {
                    pos += ORIENTATIONS as f32;
                }
                let lo = (pos.floor() as usize) % ORIENTATIONS;
                let frac = pos - pos.floor();
                let hi = (lo + 1) % ORIENTATIONS;
                let bins = &mut row[x as usize * ORIENTATIONS..(x as usize + 1) * ORIENTATIONS];
                bins[lo] += mag * (1.0 - frac);
                bins[hi] += mag * frac;
            }
        });
    out
}

/// Pools histograms into a descriptor grid. Each cell's window is
/// `quads x quads` blocks of `block x block` pixels, centered on the cell
/// center; pixels outside the image contribute zero. Block sums are softened
/// across neighbouring blocks before sampling.
fn pool(hist: &[f32], w: usize, h: usize, stride: usize, block: usize, quads: usize) -> FeatureMap {
    let (gw, gh) = (w / stride, h / stride);
    // Block (bx, by) starts at pixel (bx * block - margin, by * block - margin)
    // so that quadrant q of cell c is block c * stride / block + q.
    let window = block * quads;
    let margin = (window - stride) / 2;
    let per_cell = stride / block;
    let (bw, bh) = ((gw - 1) * per_cell + quads, (gh - 1) * per_cell + quads);

    let mut blocks = vec![0.0f32; bw * bh * ORIENTATIONS];
    blocks
        .par_chunks_mut(bw * ORIENTATIONS)
        .enumerate()
        .for_each(|(by, row)| {
            let y0 = (by * block) as isize - margin as isize;
            for bx in 0..bw {
                let x0 = (bx * block) as isize - margin as isize;
                let acc = &mut row[bx * ORIENTATIONS..(bx + 1) * ORIENTATIONS];
                for y in y0.max(0)..(y0 + block as isize).min(h as isize) {
                    for x in x0.max(0)..(x0 + block as isize).min(w as isize) {
                        let src =
                            &hist[(y as usize * w + x as usize) * ORIENTATIONS..][..ORIENTATIONS];
                        for (a, &v) in acc.iter_mut().zip(src) {
                            *a += v;
                        }
                    }
                }
            }
        });

    let blocks = soften(&blocks, bw, bh);

    let channels = quads * quads * ORIENTATIONS;
    let area = (block * block) as f32;
    let mut map = FeatureMap::zeros(channels, gw, gh, stride as u32);
    map.data
        .par_chunks_mut(gw * channels)
        .enumerate()
        .for_each(|(cy, row)| {
            for cx in 0..gw {
                let cell = &mut row[cx * channels..(cx + 1) * channels];
                for qy in 0..quads {
                    for qx in 0..quads {
                        let b = (cy * per_cell + qy) * bw + cx * per_cell + qx;
                        let src = &blocks[b * ORIENTATIONS..(b + 1) * ORIENTATIONS];
                        let dst = &mut cell[(qy * quads + qx) * ORIENTATIONS..][..ORIENTATIONS];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = (s / area).max(0.0);
                        }
                    }
                }
                normalize(cell);
            }
        });
    map
}

/// `[1, 2, 1] / 4` along both block axes, zero outside: each pixel's
/// weight spreads into the neighbouring quadrants, as in soft spatial binning.
fn soften(blocks: &[f32], bw: usize, bh: usize) -> Vec<f32> {
    const K: [f32; 3] = [0.25, 0.5, 0.25];
    let at = |v: &[f32], x: usize, y: usize, o: usize| v[(y * bw + x) * ORIENTATIONS + o];
    let mut tmp = vec![0.0f32; blocks.len()];
    let mut out = vec![0.0f32; blocks.len()];
    for y in 0..bh {
        for x in 0..bw {
            for o in 0..ORIENTATIONS {
                let mut acc = K[1] * at(blocks, x, y, o);
                if x > 0 {
                    acc += K[0] * at(blocks, x - 1, y, o);
                }
                if x + 1 < bw {
                    acc += K[2] * at(blocks, x + 1, y, o);
                }
                tmp[(y * bw + x) * ORIENTATIONS + o] = acc;
            }
        }
    }
    for y in 0..bh {
        for x in 0..bw {
            for o in 0..ORIENTATIONS {
                let mut acc = K[1] * at(&tmp, x, y, o);
                if y > 0 {
                    acc += K[0] * at(&tmp, x, y - 1, o);
                }
                if y + 1 < bh {
                    acc += K[2] * at(&tmp, x, y + 1, o);
                }
                out[(y * bw + x) * ORIENTATIONS + o] = acc;
            }
        }
    }
    out
}

fn normalize(cell: &mut [f32]) {
    let norm = cell
        .iter()
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt();
    if norm < DEGENERATE_NORM {
        cell.fill(0.0);
    } else {
        for v in cell {
            *v = (*v as f64 / norm) as f32;
        }
    }
}

pub fn write_features(pyr: &FeaturePyramid, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    encode_features(pyr, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeaturePyramid, FeatureError> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    decode_features(&mut input)
}

/// Serializes in XFM1 layout (little-endian):
/// magic, img_w, img_h, fine C, fine grid_w, fine grid_h, coarse grid_w,
/// coarse grid_h, coarse C, fine stride, coarse stride, fine data, coarse data.
pub fn encode_features(pyr: &FeaturePyramid, out: &mut impl Write) -> Result<(), FeatureError> {
    let (f, c) = (&pyr.fine, &pyr.coarse);
    out.write_all(XFM_MAGIC)?;
    let header = [
        pyr.width,
        pyr.height,
        f.channels as u32,
        f.grid_w as u32,
        f.grid_h as u32,
        c.grid_w as u32,
        c.grid_h as u32,
        c.channels as u32,
        f.stride,
        c.stride,
    ];
    for v in header {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in f.data.iter().chain(&c.data) {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn decode_features(input: &mut impl Read) -> Result<FeaturePyramid, FeatureError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != XFM_MAGIC {
        if &magic[..3] == b"XFM" {
            return Err(FeatureError::UnsupportedVersion(
                String::from_utf8_lossy(&magic).into_owned(),
            ));
        }
        return Err(FeatureError::BadMagic(magic));
    }
    let mut header = [0u32; 10];
    for v in header.iter_mut() {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b);
    }
    let [img_w, img_h, fc, fgw, fgh, cgw, cgh, cc, fs, cs] = header.map(|v| v as usize);
    if fgw != cgw * 4 || fgh != cgh * 4 {
        return Err(FeatureError::RatioViolation(format!(
            "coarse grid {cgw}x{cgh} vs fine grid {fgw}x{fgh}"
        )));
    }
    let read_map = |input: &mut dyn Read, channels: usize, gw: usize, gh: usize, stride: usize| {
        let n = channels
            .checked_mul(gw)
            .and_then(|v| v.checked_mul(gh))
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| FeatureError::DimMismatch("map too large".into()))?;
        let mut bytes = vec![0u8; n * 4];
        input.read_exact(&mut bytes).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => {
                FeatureError::DimMismatch(format!("file too short for {channels}x{gw}x{gh}"))
            }
            _ => FeatureError::Io(e),
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok::<_, FeatureError>(FeatureMap {
            channels,
            grid_w: gw,
            grid_h: gh,
            stride: stride as u32,
            data,
        })
    };
    let fine = read_map(input, fc, fgw, fgh, fs)?;
    let coarse = read_map(input, cc, cgw, cgh, cs)?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(FeatureError::DimMismatch(
            "trailing bytes after coarse data".into(),
        ));
    }
    let pyr = FeaturePyramid {
        fine,
        coarse,
        width: img_w as u32,
        height: img_h as u32,
    };
    pyr.validate()?;
    Ok(pyr)
}
