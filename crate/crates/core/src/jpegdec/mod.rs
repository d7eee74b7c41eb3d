//! Baseline JPEG decoding with region-of-interest and early-stop support.
//!
//! The decoder handles sequential (baseline and extended 8-bit) Huffman-coded
//! JPEG with 4:4:4, 4:2:2 or 4:2:0 chroma subsampling, plus grayscale. Its
//! output matches libjpeg-turbo's default settings: the accurate integer IDCT,
//! "fancy" triangular chroma upsampling and the fixed-point BT.601 color
//! transform.
//!
//! Three entry points share one engine:
//!
//! * [`decode_full`] decodes every pixel.
//! * [`decode_roi`] returns the pixels of a rectangle. Entropy decoding stops
//!   after the last MCU row the rectangle needs, and dequantization, IDCT,
//!   upsampling and color conversion are skipped for blocks that cannot
//!   influence it. When the stream has restart markers, whole intervals above
//!   the rectangle are skipped without Huffman decoding.
//! * [`decode_rows`] returns the top `n` rows (early stopping).
//!
//! Every variant produces pixels identical to cropping the full decode, because
//! the skipped work only ever feeds pixels outside the requested window.
//!
//! ```
//! use visplan::jpegdec::{compute_crop_window, RoiSpec};
//!
//! // A portrait 1080x1920 image feeding a 224x224 model only needs rows
//! // 419..1500 of the source.
//! let roi = compute_crop_window(1920, 1080, 224).unwrap();
//! assert_eq!(roi, RoiSpec { left: 0, top: 419, right: 1080, bottom: 1500 });
//! ```

mod decode;
mod header;
mod huffman;
mod idct;

use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use header::{parse_headers, Component, JpegHeader, Subsampling};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JpegError {
    #[error("missing SOI marker")]
    MissingSoi,
    #[error("unsupported JPEG: {0}")]
    Unsupported(String),
    #[error("truncated JPEG stream")]
    Truncated,
    #[error("corrupt JPEG: {0}")]
    Corrupt(String),
    #[error("premature end of entropy-coded data")]
    PrematureEnd,
    #[error("invalid region {roi:?} for a {width}x{height} image")]
    InvalidRoi { roi: RoiSpec, width: u32, height: u32 },
    #[error("image {width}x{height} is smaller than the {target}px target")]
    TooSmall { width: u32, height: u32, target: u32 },
}

/// A rectangle in decoded-image pixel coordinates, half-open on the right and
/// bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoiSpec {
    pub left: u32,
    pub top: u32,
    pub right: u32,
    pub bottom: u32,
}

impl RoiSpec {
    pub fn full(width: u32, height: u32) -> Self {
        Self { left: 0, top: 0, right: width, bottom: height }
    }

    pub fn width(&self) -> u32 {
        self.right - self.left
    }

    pub fn height(&self) -> u32 {
        self.bottom - self.top
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn is_valid_for(&self, width: u32, height: u32) -> bool {
        self.left < self.right && self.right <= width && self.top < self.bottom && self.bottom <= height
    }
}

/// Interleaved 8-bit pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u32) -> Self {
        let len = width as usize * height as usize * channels as usize;
        Self { width, height, channels, pixels: vec![0; len] }
    }

    pub fn row(&self, y: u32) -> &[u8] {
        let stride = self.width as usize * self.channels as usize;
        &self.pixels[y as usize * stride..(y as usize + 1) * stride]
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.pixels[i..i + c]
    }

    /// Copies out a sub-rectangle.
    ///
    /// # Panics
    ///
    /// Panics if `roi` does not lie inside the image.
    pub fn crop(&self, roi: RoiSpec) -> Image {
        assert!(roi.is_valid_for(self.width, self.height), "crop {roi:?} outside {}x{}", self.width, self.height);
        let c = self.channels as usize;
        let mut out = Vec::with_capacity(roi.area() as usize * c);
        for y in roi.top..roi.bottom {
            let row = self.row(y);
            out.extend_from_slice(&row[roi.left as usize * c..roi.right as usize * c]);
        }
        Image { width: roi.width(), height: roi.height(), channels: self.channels, pixels: out }
    }

    /// The first `rows` rows.
    pub fn top_rows(&self, rows: u32) -> Image {
        let rows = rows.min(self.height);
        let stride = self.width as usize * self.channels as usize;
        Image {
            width: self.width,
            height: rows,
            channels: self.channels,
            pixels: self.pixels[..rows as usize * stride].to_vec(),
        }
    }

    /// Largest per-sample absolute difference, or `None` if the shapes differ.
    pub fn max_abs_diff(&self, other: &Image) -> Option<u8> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return None;
        }
        Some(self.pixels.iter().zip(&other.pixels).map(|(a, b)| a.abs_diff(*b)).max().unwrap_or(0))
    }

    /// Writes a binary PPM (`P6`), or PGM (`P5`) for one channel.
    pub fn write_pnm<W: Write>(&self, mut w: W) -> io::Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            n => return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("{n} channels has no PNM form"))),
        };
        write!(w, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)
    }

    /// Reads a binary `P6` or `P5` file with maxval 255.
    pub fn read_pnm<R: BufRead>(mut r: R) -> io::Result<Image> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut fields = Vec::new();
        let mut token = Vec::new();
        while fields.len() < 4 {
            let mut b = [0u8];
            r.read_exact(&mut b)?;
            match b[0] {
                b'#' if token.is_empty() => {
                    let mut comment = Vec::new();
                    r.read_until(b'\n', &mut comment)?;
                }
                c if c.is_ascii_whitespace() => {
                    if !token.is_empty() {
                        fields.push(String::from_utf8_lossy(&token).into_owned());
                        token.clear();
                    }
                }
                c => token.push(c),
            }
        }
        let channels = match fields[0].as_str() {
            "P6" => 3,
            "P5" => 1,
            _ => return Err(bad("not a binary PPM/PGM")),
        };
        let num = |s: &str| s.parse::<u32>().map_err(|_| bad("bad PNM header number"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        let mut img = Image::new(width, height, channels);
        r.read_exact(&mut img.pixels)?;
        Ok(img)
    }
}

/// Work counters for one decode call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStats {
    /// MCUs in the whole scan.
    pub mcus_total: u64,
    /// MCUs whose entropy-coded data was Huffman decoded.
    pub mcus_entropy_decoded: u64,
    /// MCUs skipped by seeking over restart intervals.
    pub mcus_skipped_by_restart: u64,
    /// Blocks in the whole scan, i.e. the IDCT count of a full decode.
    pub blocks_total: u64,
    /// Blocks that were dequantized and inverse transformed.
    pub idct_blocks: u64,
    /// Output rows produced.
    pub rows_output: u32,
}

/// Decodes the whole image to RGB (grayscale images are replicated to three
/// channels).
pub fn decode_full(bytes: &[u8]) -> Result<Image, JpegError> {
    let header = parse_headers(bytes)?;
    let roi = RoiSpec::full(header.width, header.height);
    decode::decode_region(bytes, &header, roi).map(|(img, _)| img)
}

/// Decodes only the pixels inside `roi`.
pub fn decode_roi(bytes: &[u8], roi: RoiSpec) -> Result<Image, JpegError> {
    decode_roi_with_stats(bytes, roi).map(|(img, _)| img)
}

/// [`decode_roi`] plus its work counters.
pub fn decode_roi_with_stats(bytes: &[u8], roi: RoiSpec) -> Result<(Image, DecodeStats), JpegError> {
    let header = parse_headers(bytes)?;
    if !roi.is_valid_for(header.width, header.height) {
        return Err(JpegError::InvalidRoi { roi, width: header.width, height: header.height });
    }
    decode::decode_region(bytes, &header, roi)
}

/// Decodes the top `n_rows` rows and stops.
pub fn decode_rows(bytes: &[u8], n_rows: u32) -> Result<Image, JpegError> {
    decode_rows_with_stats(bytes, n_rows).map(|(img, _)| img)
}

/// [`decode_rows`] plus its work counters.
pub fn decode_rows_with_stats(bytes: &[u8], n_rows: u32) -> Result<(Image, DecodeStats), JpegError> {
    let header = parse_headers(bytes)?;
    if n_rows > header.height {
        let roi = RoiSpec::full(header.width, n_rows);
        return Err(JpegError::InvalidRoi { roi, width: header.width, height: header.height });
    }
    if n_rows == 0 {
        let stats = DecodeStats {
            mcus_total: header.mcu_count(),
            blocks_total: header.block_count(),
            ..DecodeStats::default()
        };
        return Ok((Image::new(header.width, 0, 3), stats));
    }
    decode::decode_region(bytes, &header, RoiSpec::full(header.width, n_rows))
}

/// Source-pixel window needed to produce a central `target`x`target` crop
/// after an aspect-preserving resize of the short side to `target`.
///
/// The resized long side is truncated to an integer, the crop is centered in
/// resized coordinates, and its bounds are scaled back by
/// `min(height, width) / target`, rounding left/top down and right/bottom up
/// so the window never under-covers the crop. Bounds are clamped to the
/// image.
pub fn compute_crop_window(height: u32, width: u32, target: u32) -> Result<RoiSpec, JpegError> {
    if target == 0 || height.min(width) < target {
        return Err(JpegError::TooSmall { width, height, target });
    }
    let short = height.min(width) as f64;
    let t = target as f64;
    let resized_w = (width as f64 * t / short).floor();
    let resized_h = (height as f64 * t / short).floor();
    let l = (resized_w - t) / 2.0;
    let top = (resized_h - t) / 2.0;
    let scale = short / t;
    let left = ((l * scale).floor().max(0.0) as u32).min(width - 1);
    let top_px = ((top * scale).floor().max(0.0) as u32).min(height - 1);
    let right = ((((l + t) * scale).ceil()) as u32).clamp(left + 1, width);
    let bottom = ((((top + t) * scale).ceil()) as u32).clamp(top_px + 1, height);
    Ok(RoiSpec { left, top: top_px, right, bottom })
}

/// Grows `roi` outward to multiples of `mcu`, clamped to the image bounds.
pub fn macroblock_align(roi: RoiSpec, mcu: u32, width: u32, height: u32) -> RoiSpec {
    assert!(mcu > 0, "macroblock size must be positive");
    RoiSpec {
        left: roi.left / mcu * mcu,
        top: roi.top / mcu * mcu,
        right: roi.right.div_ceil(mcu).saturating_mul(mcu).min(width),
        bottom: roi.bottom.div_ceil(mcu).saturating_mul(mcu).min(height),
    }
}

/// Reads a whole JPEG file and decodes it.
pub fn decode_file(path: impl AsRef<std::path::Path>) -> io::Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_full(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
