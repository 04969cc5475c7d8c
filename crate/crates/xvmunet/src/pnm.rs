//! Binary netpbm image I/O: grayscale PGM (P5) and RGB PPM (P6), maxval 255.
//!
//! Both writers emit a fixed canonical header (`P5\n{w} {h}\n255\n`), so a
//! write→read→write cycle is byte-identical. The readers accept any legal
//! header whitespace and `#` comments.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<GrayImage> {
        if pixels.len() != width * height {
            return Err(Error::Contract(format!(
                "gray image {width}×{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(GrayImage { width, height, pixels })
    }
}

/// Row-major 8-bit RGB image, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<RgbImage> {
        if pixels.len() != 3 * width * height {
            return Err(Error::Contract(format!(
                "rgb image {width}×{height} needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(RgbImage { width, height, pixels })
    }
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    let (w, h, data) = parse_body(&bytes, b"P5", 1, path)?;
    Ok(GrayImage { width: w, height: h, pixels: data })
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path)?;
    let (w, h, data) = parse_body(&bytes, b"P6", 3, path)?;
    Ok(RgbImage { width: w, height: h, pixels: data })
}

/// Reads either format by magic number; returns (width, height, channels,
/// interleaved bytes).
pub fn read_auto(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        let (w, h, data) = parse_body(&bytes, b"P5", 1, path)?;
        Ok((w, h, 1, data))
    } else if bytes.starts_with(b"P6") {
        let (w, h, data) = parse_body(&bytes, b"P6", 3, path)?;
        Ok((w, h, 3, data))
    } else {
        Err(Error::Data(format!("{}: not a binary PGM/PPM file", path.display())))
    }
}

fn parse_body(
    bytes: &[u8],
    magic: &[u8],
    channels: usize,
    path: &Path,
) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    if !bytes.starts_with(magic) {
        return Err(bad(format!(
            "expected magic {}, found {:?}",
            String::from_utf8_lossy(magic),
            &bytes[..bytes.len().min(2)]
        )));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and # comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("truncated or malformed header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are UTF-8");
        *field = text
            .parse::<usize>()
            .map_err(|_| bad(format!("header field {text} out of range")))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval} unsupported (only 255)")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing whitespace after maxval".into()));
    }
    pos += 1;
    let need = w * h * channels;
    let rest = &bytes[pos..];
    if rest.len() != need {
        return Err(bad(format!("expected {need} raster bytes, found {}", rest.len())));
    }
    Ok((w, h, rest.to_vec()))
}
