//! Binary NetPBM (P5 grayscale, P6 RGB) with 8-bit samples.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB image plus a free-form modality tag (canny, depth, skeleton, ...).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
    pub modality: String,
}

impl ConditionImage {
    pub fn from_rgb(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{} bytes do not form a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            modality: "other".into(),
        })
    }

    /// Grayscale promoted to RGB by replication.
    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Result<Self> {
        Self::from_rgb(width, height, gray.iter().flat_map(|&g| [g, g, g]).collect())
    }

    pub fn with_modality(mut self, modality: impl Into<String>) -> Self {
        self.modality = modality.into();
        self
    }

    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Image("truncated header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ConditionImage> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        "P2" | "P3" => return Err(Error::Image(format!("ASCII NetPBM ({magic}) is not supported"))),
        other => return Err(Error::Image(format!("unsupported magic {other:?}"))),
    };
    let mut num = |what: &str| -> Result<usize> {
        let tok = next_token(bytes, &mut pos)?;
        tok.parse()
            .map_err(|_| Error::Image(format!("malformed {what} {tok:?}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Image("zero image dimension".into()));
    }
    if maxval != 255 {
        return Err(Error::Image(format!("maxval {maxval} unsupported (8-bit only)")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Image("missing raster".into()));
    }
    pos += 1;
    let need = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::Image(format!(
            "truncated raster: {} of {need} bytes",
            raster.len()
        )));
    }
    let raster = &raster[..need];
    if channels == 1 {
        ConditionImage::from_gray(width, height, raster)
    } else {
        ConditionImage::from_rgb(width, height, raster.to_vec())
    }
}

/// Read a condition image; grayscale inputs are replicated to RGB.
pub fn ingest_image(path: &Path) -> Result<ConditionImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| e.context(format!("image {}", path.display())))
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

pub fn write_ppm(path: &Path, image: &ConditionImage) -> Result<()> {
    fs::write(path, encode_ppm(image.width, image.height, &image.pixels)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, gray)).map_err(|e| Error::io(path, e))
}
