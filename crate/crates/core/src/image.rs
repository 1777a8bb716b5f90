//! Image containers and binary PGM / PPM codecs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Per-pixel occupancy in `[0, 1]`, row-major. `sigma` is the softness the
/// mask was rendered with; `0` marks a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub sigma: f64,
}

impl SoftMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
            sigma: 0.0,
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1.0; width * height],
            sigma: 0.0,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Pixels with occupancy at or above `threshold`.
    pub fn threshold(&self, threshold: f64) -> Vec<bool> {
        self.data.iter().map(|&o| o >= threshold).collect()
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&o| o >= 0.5).count()
    }

    /// Binary PGM (P5, maxval 255), occupancy x 255 rounded half up.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&o| quantize(o)));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let (w, h, body) = parse_pnm(bytes, b"P5", 1)?;
        Ok(Self {
            width: w,
            height: h,
            data: body.iter().map(|&b| b as f64 / 255.0).collect(),
            sigma: 0.0,
        })
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// RGB image with channels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![color; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in &self.data {
            out.extend(px.iter().map(|&c| quantize(c)));
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (w, h, body) = parse_pnm(bytes, b"P6", 3)?;
        Ok(Self {
            width: w,
            height: h,
            data: body
                .chunks_exact(3)
                .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
                .collect(),
        })
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn parse_pnm<'a>(bytes: &'a [u8], magic: &[u8], channels: usize) -> Result<(usize, usize, &'a [u8])> {
    let bad = |reason: &str| Error::Format {
        what: "PNM image",
        reason: reason.into(),
    };
    let mut pos = 0;
    let mut token = || -> Option<&'a [u8]> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| &bytes[start..pos])
    };
    let number = |t: Option<&[u8]>| -> Option<usize> { std::str::from_utf8(t?).ok()?.parse().ok() };
    if token() != Some(magic) {
        return Err(bad("wrong magic"));
    }
    let w = number(token()).ok_or_else(|| bad("missing width"))?;
    let h = number(token()).ok_or_else(|| bad("missing height"))?;
    let maxval = number(token()).ok_or_else(|| bad("missing maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h * channels {
        return Err(bad("pixel payload size mismatch"));
    }
    Ok((w, h, body))
}
