//! Deterministic synthetic images and HPatches-layout fixtures for tests,
//! examples and smoke benchmarks.

use std::path::Path;

use crate::eval::Homography;
use crate::imgio::{write_pnm, Image, ImageError};

fn hash(seed: u64, x: i64, y: i64) -> f64 {
    // splitmix64 over the packed lattice coordinate
    let mut z = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64, spacing: f64) -> f64 {
    let (u, v) = (x / spacing, y / spacing);
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let a = hash(seed, x0, y0);
    let b = hash(seed, x0 + 1, y0);
    let c = hash(seed, x0, y0 + 1);
    let d = hash(seed, x0 + 1, y0 + 1);
    let top = a + (b - a) * fx;
    let bottom = c + (d - c) * fx;
    top + (bottom - top) * fy
}

/// Multi-octave value noise sampled on an infinite plane; `(ox, oy)` is the
/// plane position of pixel `(0, 0)`. Windows at different offsets of the
/// same seed are exact translations of each other.
pub fn noise_window(width: u32, height: u32, seed: u64, ox: i64, oy: i64) -> Image {
    let octaves = [(24.0, 0.45), (8.0, 0.35), (3.0, 0.2)];
    Image::from_fn(width, height, |x, y| {
        let (px, py) = ((x as i64 + ox) as f64, (y as i64 + oy) as f64);
        let v: f64 = octaves
            .iter()
            .enumerate()
            .map(|(i, &(s, w))| w * value_noise(seed.wrapping_add(i as u64 * 7919), px, py, s))
            .sum();
        (v * 255.0).round().clamp(0.0, 255.0) as u8
    })
}

pub fn textured_noise(width: u32, height: u32, seed: u64) -> Image {
    noise_window(width, height, seed, 0, 0)
}

/// A source/target pair where the target shows the source content moved by
/// `(dx, dy)` pixels, with the matching ground-truth homography.
pub fn translated_pair(
    width: u32,
    height: u32,
    dx: i64,
    dy: i64,
    seed: u64,
) -> (Image, Image, Homography) {
    let src = noise_window(width, height, seed, 0, 0);
    let tgt = noise_window(width, height, seed, -dx, -dy);
    (src, tgt, Homography::translation(dx as f64, dy as f64))
}

/// A periodic tile pattern with weak noise: many near-identical candidates
/// for every query.
pub fn repetitive(width: u32, height: u32, period: u32, seed: u64) -> Image {
    Image::from_fn(width, height, |x, y| {
        let (u, v) = (
            (x % period) as f64 / period as f64,
            (y % period) as f64 / period as f64,
        );
        let blob = if (u - 0.5).abs() < 0.25 && (v - 0.5).abs() < 0.25 {
            200.0
        } else {
            50.0
        };
        let bar = if u < 0.1 { 40.0 } else { 0.0 };
        let n = 40.0 * (value_noise(seed, x as f64, y as f64, 6.0) - 0.5);
        (blob + bar + n).round().clamp(0.0, 255.0) as u8
    })
}

/// Writes an HPatches-style sequence directory: `1.ppm..6.ppm` and
/// `H_1_2..H_1_6`.
pub fn write_sequence(
    dir: &Path,
    images: &[Image; 6],
    homographies: &[Homography; 5],
) -> Result<(), ImageError> {
    std::fs::create_dir_all(dir).map_err(|source| ImageError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for (i, img) in images.iter().enumerate() {
        write_pnm(img, dir.join(format!("{}.ppm", i + 1)))?;
    }
    for (k, h) in homographies.iter().enumerate() {
        let text =
            h.m.iter()
                .map(|r| format!("{} {} {}", r[0], r[1], r[2]))
                .collect::<Vec<_>>()
                .join("\n");
        let path = dir.join(format!("H_1_{}", k + 2));
        std::fs::write(&path, text + "\n").map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_are_translations() {
        let (src, tgt, _) = translated_pair(64, 48, 16, 0, 3);
        for y in 0..48 {
            for x in 16..64 {
                assert_eq!(tgt.gray(x, y), src.gray(x - 16, y));
            }
        }
    }

    #[test]
    fn noise_is_textured() {
        let img = textured_noise(64, 64, 1);
        let lo = *img.data.iter().min().unwrap();
        let hi = *img.data.iter().max().unwrap();
        assert!(hi - lo > 80);
    }
}
