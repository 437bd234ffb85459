//! Image loading, grayscale conversion and deterministic bilinear resizing.
//!
//! Every coordinate produced downstream refers to the raster returned by
//! [`resize_bilinear`]; the scale factors it returns map those coordinates
//! back to the original image.

use std::io::{BufRead, Cursor, Write};
use std::path::Path;

use thiserror::Error;

/// Side length, in pixels, that every resized dimension is snapped to.
pub const GRID_ALIGN: u32 = 16;
/// Smallest accepted `target_long_side`.
pub const MIN_LONG_SIDE: u32 = 32;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("unsupported bit depth: {0}")]
    UnsupportedBitDepth(String),
    #[error("truncated pixel data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("resolution below minimum: {0} < {MIN_LONG_SIDE}")]
    ResolutionTooSmall(u32),
    #[error("invalid image: {0}")]
    Invalid(String),
}

impl ImageError {
    /// Stable numeric code per error kind, for scripting.
    pub fn code(&self) -> u32 {
        match self {
            ImageError::Io { .. } => 10,
            ImageError::MalformedHeader(_) => 11,
            ImageError::UnsupportedFormat(_) => 12,
            ImageError::UnsupportedBitDepth(_) => 13,
            ImageError::Truncated { .. } => 14,
            ImageError::ResolutionTooSmall(_) => 15,
            ImageError::Invalid(_) => 16,
        }
    }
}

/// An 8-bit raster with one (gray) or three (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Invalid(format!("empty image {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(ImageError::Invalid(format!("{channels} channels")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(ImageError::Invalid(format!(
                "data length {} != {expected}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Grayscale image filled from a closure over `(x, y)`.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn long_side(&self) -> u32 {
        self.width.max(self.height)
    }

    /// Sample of a single-channel image. Panics on out-of-range access.
    #[inline]
    pub fn gray(&self, x: u32, y: u32) -> u8 {
        debug_assert_eq!(self.channels, 1);
        self.data[y as usize * self.width as usize + x as usize]
    }
}

/// Target size for the up/down-sampling step. Aspect ratio is always kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResizeSpec {
    pub target_long_side: u32,
}

impl ResizeSpec {
    pub fn new(target_long_side: u32) -> Result<Self, ImageError> {
        if target_long_side < MIN_LONG_SIDE {
            return Err(ImageError::ResolutionTooSmall(target_long_side));
        }
        Ok(Self { target_long_side })
    }

    /// Output dimensions for an input of `width` x `height`: the long side
    /// becomes the target, the short side keeps the aspect ratio, and both are
    /// rounded to the nearest multiple of [`GRID_ALIGN`] (halves round up),
    /// never below one multiple.
    pub fn output_dims(&self, width: u32, height: u32) -> (u32, u32) {
        let long = width.max(height) as f64;
        let scale = self.target_long_side as f64 / long;
        let snap = |v: f64| -> u32 {
            let cells = (v / GRID_ALIGN as f64).round().max(1.0);
            cells as u32 * GRID_ALIGN
        };
        (snap(width as f64 * scale), snap(height as f64 * scale))
    }
}

/// Per-axis factors mapping resized coordinates back to the original image:
/// `original = (resized + 0.5) * scale - 0.5`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scale {
    pub x: f64,
    pub y: f64,
}

impl Scale {
    pub const IDENTITY: Scale = Scale { x: 1.0, y: 1.0 };

    pub fn to_original(&self, p: (f64, f64)) -> (f64, f64) {
        ((p.0 + 0.5) * self.x - 0.5, (p.1 + 0.5) * self.y - 0.5)
    }

    pub fn to_resized(&self, p: (f64, f64)) -> (f64, f64) {
        ((p.0 + 0.5) / self.x - 0.5, (p.1 + 0.5) / self.y - 0.5)
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image, ImageError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_image(&bytes)
}

/// Decodes binary PGM (P5), binary PPM (P6) or 8-bit PNG from memory.
pub fn decode_image(bytes: &[u8]) -> Result<Image, ImageError> {
    match bytes {
        [b'P', b'5', ..] | [b'P', b'6', ..] => decode_pnm(bytes),
        [0x89, b'P', b'N', b'G', ..] => decode_png(bytes),
        [b'P', d, ..] if d.is_ascii_digit() => Err(ImageError::UnsupportedFormat(format!(
            "netpbm variant P{}",
            *d as char
        ))),
        _ => Err(ImageError::UnsupportedFormat(
            "not a PGM, PPM or PNG file".into(),
        )),
    }
}

fn decode_pnm(bytes: &[u8]) -> Result<Image, ImageError> {
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&c) = bytes.get(pos) {
                        pos += 1;
                        if c == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => {
                    return Err(ImageError::MalformedHeader(
                        "unexpected end of header".into(),
                    ))
                }
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::MalformedHeader(
                "expected a decimal number".into(),
            ));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::MalformedHeader("number out of range".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(ImageError::MalformedHeader(
                "missing raster separator".into(),
            ))
        }
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImageError::MalformedHeader(format!(
            "zero dimension {width}x{height}"
        )));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(ImageError::MalformedHeader(format!("maxval {maxval}")));
    }
    if maxval > 255 {
        return Err(ImageError::UnsupportedBitDepth(format!(
            "16-bit netpbm (maxval {maxval})"
        )));
    }
    let expected = width as usize * height as usize * channels as usize;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: raster.len(),
        });
    }
    let mut data = raster[..expected].to_vec();
    if maxval != 255 {
        for v in &mut data {
            *v = ((*v as u32 * 255 + maxval / 2) / maxval).min(255) as u8;
        }
    }
    Image::new(width, height, channels, data)
}

fn decode_png(bytes: &[u8]) -> Result<Image, ImageError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(png_err)?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(ImageError::UnsupportedBitDepth("16-bit PNG".into()));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::MalformedHeader("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::UnsupportedBitDepth(format!(
            "{:?}",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let channels: u8 = match info.color_type {
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
        png::ColorType::Rgb | png::ColorType::Rgba => 3,
        other => {
            return Err(ImageError::UnsupportedFormat(format!(
                "PNG color type {other:?}"
            )))
        }
    };
    let mut data = Vec::with_capacity(w * h * channels as usize);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * src_channels].chunks_exact(src_channels) {
            data.extend_from_slice(&px[..channels as usize]);
        }
    }
    Image::new(info.width, info.height, channels, data)
}

fn png_err(e: png::DecodingError) -> ImageError {
    match e {
        png::DecodingError::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            ImageError::MalformedHeader("truncated PNG".into())
        }
        png::DecodingError::Format(f) => ImageError::MalformedHeader(f.to_string()),
        other => ImageError::UnsupportedFormat(other.to_string()),
    }
}

/// Writes a binary PGM (single channel) or PPM (three channels).
pub fn write_pnm(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let io_err = |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    write!(out, "{magic}\n{} {}\n255\n", img.width, img.height).map_err(io_err)?;
    out.write_all(&img.data).map_err(io_err)?;
    out.flush().map_err(io_err)
}

/// Writes an 8-bit grayscale or RGB PNG.
pub fn write_png(img: &Image, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let io_err = |source| ImageError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let mut enc = png::Encoder::new(file, img.width, img.height);
    enc.set_color(if img.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| ImageError::UnsupportedFormat(e.to_string()))?;
    writer
        .write_image_data(&img.data)
        .map_err(|e| ImageError::UnsupportedFormat(e.to_string()))
}

/// Luma conversion with the Rec.601 weights, rounded to nearest.
pub fn to_grayscale(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| {
            let luma = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            luma.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Image {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}

/// Resizes so the long side matches `spec` (snapped to the 16-pixel grid) and
/// returns the resized image along with the resized->original scale factors.
pub fn resize_bilinear(img: &Image, spec: ResizeSpec) -> Result<(Image, Scale), ImageError> {
    if spec.target_long_side < MIN_LONG_SIDE {
        return Err(ImageError::ResolutionTooSmall(spec.target_long_side));
    }
    let (w, h) = spec.output_dims(img.width, img.height);
    let out = resample(img, w, h);
    let scale = Scale {
        x: img.width as f64 / w as f64,
        y: img.height as f64 / h as f64,
    };
    Ok((out, scale))
}

/// Bilinear resampling to exact dimensions with half-pixel centers and edge
/// clamping. Same-size resampling returns the input unchanged.
pub fn resample(img: &Image, width: u32, height: u32) -> Image {
    assert!(width > 0 && height > 0, "resample to empty image");
    if width == img.width && height == img.height {
        return img.clone();
    }
    let taps = |out: u32, inp: u32| -> Vec<(usize, usize, f64)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp as usize - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(width, img.width);
    let ys = taps(height, img.height);
    let c = img.channels as usize;
    let stride = img.width as usize * c;
    let mut data = Vec::with_capacity(width as usize * height as usize * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let at = |x: usize, y: usize| img.data[y * stride + x * c + ch] as f64;
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image {
        width,
        height,
        channels: img.channels,
        data,
    }
}

/// Reads a binary PGM into a gray image; convenience for heatmap round-trips.
pub fn read_pgm(reader: &mut impl BufRead) -> Result<Image, ImageError> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|source| ImageError::Io {
            path: "<reader>".into(),
            source,
        })?;
    decode_image(&bytes)
}
