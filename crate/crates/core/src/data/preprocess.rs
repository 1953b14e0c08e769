//! Raw 8-bit images to model-space tensors: centred zero padding to a
//! square, bilinear resize, then [0, 255] → [−1, 1].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Pgm;

/// Centres the image in a square canvas of zeros.
pub fn pad_to_square(pixels: &[f64], width: usize, height: usize) -> (Vec<f64>, usize) {
    let s = width.max(height);
    let (ox, oy) = ((s - width) / 2, (s - height) / 2);
    let mut out = vec![0.0; s * s];
    for y in 0..height {
        out[(y + oy) * s + ox..(y + oy) * s + ox + width].copy_from_slice(&pixels[y * width..(y + 1) * width]);
    }
    (out, s)
}

/// Square bilinear resize with pixel-centre alignment; the identity when
/// the sizes agree.
pub fn bilinear_resize(src: &[f64], size: usize, target: usize) -> Vec<f64> {
    let scale = size as f64 / target as f64;
    let coord = |i: usize| {
        let c = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(size - 1);
        (lo, hi, c - lo as f64)
    };
    let mut out = vec![0.0; target * target];
    for y in 0..target {
        let (y0, y1, fy) = coord(y);
        for x in 0..target {
            let (x0, x1, fx) = coord(x);
            let top = src[y0 * size + x0] * (1.0 - fx) + src[y0 * size + x1] * fx;
            let bot = src[y1 * size + x0] * (1.0 - fx) + src[y1 * size + x1] * fx;
            out[y * target + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// `(1, target, target)` tensor in [−1, 1].
pub fn preprocess(raw: &Pgm, target: usize) -> Result<Tensor<f32>> {
    if raw.width == 0 || raw.height == 0 || target == 0 {
        return Err(Error::config("image", "zero dimension"));
    }
    let px: Vec<f64> = raw.pixels.iter().map(|&p| p as f64).collect();
    let (sq, s) = pad_to_square(&px, raw.width, raw.height);
    let r = bilinear_resize(&sq, s, target);
    let data = r.iter().map(|&v| (v / 127.5 - 1.0) as f32).collect();
    Tensor::from_vec(&[1, target, target], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pgm(width: usize, height: usize, f: impl Fn(usize) -> u8) -> Pgm {
        Pgm {
            width,
            height,
            pixels: (0..width * height).map(f).collect(),
        }
    }

    #[test]
    fn intensity_map_endpoints() {
        let out = preprocess(&pgm(2, 1, |i| [0, 255][i]), 2).unwrap();
        // the padded second row is raw zero, i.e. −1
        assert_eq!(out.data(), &[-1.0, 1.0, -1.0, -1.0]);
        let mid = bilinear_resize(&[0.0, 255.0, 0.0, 255.0], 2, 1);
        assert!(((mid[0] / 127.5 - 1.0) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn conformant_square_is_identity() {
        let p = pgm(8, 8, |i| (i * 37 % 256) as u8);
        let out = preprocess(&p, 8).unwrap();
        for (o, &r) in out.data().iter().zip(&p.pixels) {
            assert!((*o - (r as f32 / 127.5 - 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn tall_image_gets_side_bands() {
        let px = vec![200.0; 64 * 32];
        let (sq, s) = pad_to_square(&px, 32, 64);
        assert_eq!(s, 64);
        for y in 0..64 {
            let row = &sq[y * 64..(y + 1) * 64];
            assert!(row[..16].iter().all(|&v| v == 0.0));
            assert!(row[16..48].iter().all(|&v| v == 200.0));
            assert!(row[48..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn idempotent_on_conformant_output() {
        let p = pgm(20, 12, |i| (i * 11 % 256) as u8);
        let once = preprocess(&p, 16).unwrap();
        let again = preprocess(&Pgm::from_image(&once).unwrap(), 16).unwrap();
        // a second pass only sees its own 8-bit quantization
        assert!(once.mean_abs_diff(&again).unwrap() < 1.0 / 127.5);
        let third = preprocess(&Pgm::from_image(&again).unwrap(), 16).unwrap();
        assert!(again.mean_abs_diff(&third).unwrap() < 1e-6);
    }

    #[test]
    fn rejects_empty() {
        assert!(preprocess(&pgm(0, 3, |_| 0), 4).is_err());
    }
}
