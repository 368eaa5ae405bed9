//! Binary 8-bit PPM (P6) images.

use std::path::Path;

use docsegtr_core::Tensor;

use crate::error::{AppError, AppResult};

/// Interleaved 8-bit RGB pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    /// Quantizes a `3×H×W` tensor in `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Self {
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let plane = h * w;
        let mut pixels = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                let v = (t.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round();
                pixels.push(v as u8);
            }
        }
        Self {
            width: w,
            height: h,
            pixels,
        }
    }

    /// Planar `3×H×W` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn(&[3, self.height, self.width], |i| {
            f64::from(self.pixels[(i % plane) * 3 + i / plane]) / 255.0
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // whitespace and '#' comments between header fields
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PPM header".into());
            }
            fields
                .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII PPM header")?);
        }
        if fields[0] != "P6" {
            return Err(format!("expected P6 magic, found {:?}", fields[0]));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| format!("bad header number {s:?}"))
        };
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(format!("only 8-bit PPM is supported, maxval {maxval}"));
        }
        // exactly one whitespace byte ends the header
        pos += 1;
        let n = width * height * 3;
        if width == 0 || height == 0 || bytes.len() < pos + n {
            return Err(format!("expected {n} pixel bytes for {width}x{height}"));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..pos + n].to_vec(),
        })
    }
}

pub fn read_ppm(path: &Path) -> AppResult<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    RgbImage::decode(&bytes).map_err(|m| AppError::format(path, m))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> AppResult<()> {
    std::fs::write(path, img.encode()).map_err(|e| AppError::io(path, e))
}
