//! Binary greyscale PGM (P5) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    /// A `(1, h, w)` or `(h, w)` image in [−1, 1], quantized to 8 bits.
    pub fn from_image(img: &Tensor<f32>) -> Result<Self> {
        let (height, width) = match img.shape() {
            [1, h, w] | [h, w] => (*h, *w),
            s => return Err(Error::shape(&[1, 0, 0], s)),
        };
        Ok(Pgm {
            width,
            height,
            pixels: quantize(img.data()),
        })
    }

    pub fn to_bytes(&self, comments: &[String]) -> Vec<u8> {
        let mut out = b"P5\n".to_vec();
        for c in comments {
            out.extend_from_slice(format!("# {c}\n").as_bytes());
        }
        out.extend_from_slice(format!("{} {}\n255\n", self.width, self.height).as_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < buf.len() && buf[pos] == b'#' {
                    while pos < buf.len() && buf[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
        };
        if token()? != "P5" {
            return Err(bad("not a binary PGM (magic P5)"));
        }
        let mut num = |what: &str| -> Result<usize> {
            token()?.parse().map_err(|_| bad(&format!("invalid {what}")))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if maxval != 255 {
            return Err(bad(&format!("maxval {maxval} unsupported, expected 255")));
        }
        if width == 0 || height == 0 {
            return Err(bad("zero image dimension"));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let len = width * height;
        if buf.len() != start + len {
            return Err(bad(&format!("expected {len} raster bytes, found {}", buf.len().saturating_sub(start))));
        }
        Ok(Pgm {
            width,
            height,
            pixels: buf[start..].to_vec(),
        })
    }

    /// Linear map of the raster onto [−1, 1].
    pub fn to_image(&self) -> Tensor<f32> {
        let data = self.pixels.iter().map(|&p| p as f32 / 127.5 - 1.0).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("sized to raster")
    }
}

/// [−1, 1] to 8 bits, rounding to nearest.
pub fn quantize(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
        .collect()
}

pub fn write_pgm(path: &Path, pgm: &Pgm, comments: &[String]) -> Result<()> {
    std::fs::write(path, pgm.to_bytes(comments)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Pgm::from_bytes(&buf, path)
}
