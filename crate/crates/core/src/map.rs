use std::path::Path;

use crate::imgio::{write_pnm, Image, ImageError};

/// A 2D map over a cell grid, row-major. Used for single-query correlation
/// maps at either resolution, re-weighted maps and ground-truth PDFs.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl CorrelationMap2D {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "map data length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    /// First maximal cell in row-major order, i.e. ties resolve to the
    /// lexicographically smallest `(y, x)`.
    pub fn argmax(&self) -> ((usize, usize), f32) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        ((best % self.width, best / self.width), self.data[best])
    }

    /// Number of cells strictly above half of the map maximum.
    pub fn count_above_half_max(&self) -> usize {
        let half = self.max() / 2.0;
        self.data.iter().filter(|&&v| v > half).count()
    }

    /// Linear quantization of `[0, max]` to `[0, 255]`; an all-zero map stays zero.
    pub fn to_image(&self) -> Image {
        let max = self.max();
        let data = self
            .data
            .iter()
            .map(|&v| {
                if max > 0.0 {
                    (v.max(0.0) as f64 / max as f64 * 255.0).round().min(255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        Image {
            width: self.width as u32,
            height: self.height as u32,
            channels: 1,
            data,
        }
    }
}

/// Writes a map as a binary PGM heatmap.
pub fn export_heatmap(map: &CorrelationMap2D, path: impl AsRef<Path>) -> Result<(), ImageError> {
    write_pnm(&map.to_image(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgio::load_image;

    #[test]
    fn zero_and_one_hot_heatmaps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.pgm");
        export_heatmap(&CorrelationMap2D::filled(5, 3, 0.0), &p).unwrap();
        assert!(load_image(&p).unwrap().data.iter().all(|&v| v == 0));

        let mut m = CorrelationMap2D::filled(4, 4, 0.0);
        m.data[6] = 0.3;
        export_heatmap(&m, &p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.data.iter().filter(|&&v| v == 255).count(), 1);
        assert_eq!(img.data[6], 255);
        assert_eq!(img.data.iter().filter(|&&v| v != 0).count(), 1);
    }

    #[test]
    fn heatmap_round_trip_matches_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.pgm");
        let m = CorrelationMap2D::new(3, 2, vec![0.0, 0.1, 0.25, 0.5, 0.9, 1.0]);
        export_heatmap(&m, &p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        let expected: Vec<u8> = m
            .data
            .iter()
            .map(|&v| (v as f64 * 255.0).round() as u8)
            .collect();
        assert_eq!(img.data, expected);
    }

    #[test]
    fn argmax_prefers_first_cell() {
        let m = CorrelationMap2D::new(2, 2, vec![0.1, 0.5, 0.5, 0.2]);
        assert_eq!(m.argmax(), ((1, 0), 0.5));
        assert_eq!(CorrelationMap2D::filled(3, 3, 0.0).argmax(), ((0, 0), 0.0));
    }
}
