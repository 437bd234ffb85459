//! Ground-truth probability maps for keypoint supervision and the Frobenius
//! discrepancy against predicted maps.

use thiserror::Error;

use crate::features::GridGeometry;
use crate::map::CorrelationMap2D;

#[derive(Debug, Error, PartialEq)]
pub enum PdfError {
    #[error("keypoint ({0}, {1}) outside the {2}x{3} image")]
    OutsideImage(f64, f64, usize, usize),
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

/// A normalized probability map over a cell grid.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointPDF {
    pub width: usize,
    pub height: usize,
    pub probs: Vec<f32>,
}

impl KeypointPDF {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.probs[y * self.width + x]
    }

    pub fn to_map(&self) -> CorrelationMap2D {
        CorrelationMap2D::new(self.width, self.height, self.probs.clone())
    }
}

const BINOMIAL: [f64; 3] = [0.25, 0.5, 0.25];

/// Bilinear split of a keypoint over its four nearest cell centers, before
/// blurring. The image extent is taken as `grid * stride` pixels.
pub fn keypoint_mass(kp: (f64, f64), grid: GridGeometry) -> Result<KeypointPDF, PdfError> {
    let (w, h) = (grid.grid_w, grid.grid_h);
    let (img_w, img_h) = (w * grid.stride as usize, h * grid.stride as usize);
    let inside = |v: f64, n: usize| v.is_finite() && v >= 0.0 && v <= (n - 1) as f64;
    if !inside(kp.0, img_w) || !inside(kp.1, img_h) {
        return Err(PdfError::OutsideImage(kp.0, kp.1, img_w, img_h));
    }
    let (u, v) = grid.to_cell_coords(kp);
    let split = |c: f64, n: usize| -> (usize, usize, f64) {
        let c = c.clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let (x0, x1, fx) = split(u, w);
    let (y0, y1, fy) = split(v, h);

    let mut mass = vec![0.0f64; w * h];
    mass[y0 * w + x0] += (1.0 - fx) * (1.0 - fy);
    mass[y0 * w + x1] += fx * (1.0 - fy);
    mass[y1 * w + x0] += (1.0 - fx) * fy;
    mass[y1 * w + x1] += fx * fy;
    Ok(KeypointPDF {
        width: w,
        height: h,
        probs: mass.iter().map(|&p| p as f32).collect(),
    })
}

/// [`keypoint_mass`] blurred with the 3x3 binomial kernel (zero padding) and
/// renormalized to sum 1.
pub fn keypoint_to_pdf(kp: (f64, f64), grid: GridGeometry) -> Result<KeypointPDF, PdfError> {
    let KeypointPDF {
        width: w,
        height: h,
        probs,
    } = keypoint_mass(kp, grid)?;
    let mass: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
    let mut blurred = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            let m = mass[y * w + x];
            if m == 0.0 {
                continue;
            }
            for (dy, ky) in BINOMIAL.iter().enumerate() {
                for (dx, kx) in BINOMIAL.iter().enumerate() {
                    let (ny, nx) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        blurred[ny as usize * w + nx as usize] += m * ky * kx;
                    }
                }
            }
        }
    }
    let total: f64 = blurred.iter().sum();
    Ok(KeypointPDF {
        width: w,
        height: h,
        probs: blurred.iter().map(|&p| (p / total) as f32).collect(),
    })
}

/// `sqrt(sum((pred - gt)^2))`. The prediction is used as given; callers pick
/// its normalization.
pub fn fnorm_loss(pred: &CorrelationMap2D, gt: &KeypointPDF) -> Result<f64, PdfError> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(PdfError::ShapeMismatch(
            pred.width,
            pred.height,
            gt.width,
            gt.height,
        ));
    }
    Ok(pred
        .data
        .iter()
        .zip(&gt.probs)
        .map(|(&p, &g)| {
            let d = p as f64 - g as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}
