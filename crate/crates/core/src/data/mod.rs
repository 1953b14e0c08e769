//! Synthetic planted-confounder images, preprocessing, dataset I/O and the
//! marker detector.

mod confounder;
mod io;
mod pgm;
mod preprocess;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use confounder::{confounder_prevalence_report, marker_detector, paired_binomial_p, ConfounderReport};
pub use io::{load_dataset, save_dataset, LABELS_CSV, LABELS_HEADER};
pub use pgm::{quantize, read_pgm, write_pgm, Pgm};
pub use preprocess::{bilinear_resize, pad_to_square, preprocess};

/// Half-open pixel rectangle `[row0, row1) × [col0, col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Rect {
    pub const fn new(row0: usize, row1: usize, col0: usize, col1: usize) -> Self {
        Rect { row0, row1, col0, col1 }
    }

    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }

    pub fn fits(&self, size: usize) -> bool {
        self.row0 < self.row1 && self.col0 < self.col1 && self.row1 <= size && self.col1 <= size
    }

    pub fn overlaps(&self, o: &Rect) -> bool {
        self.row0 < o.row1 && o.row0 < self.row1 && self.col0 < o.col1 && o.col0 < self.col1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub disease_prevalence: f64,
    /// P(marker | disease).
    pub confounder_given_disease: f64,
    /// P(marker | healthy).
    pub confounder_given_healthy: f64,
    pub marker_region: Rect,
    /// Region the blob centre is drawn from.
    pub blob_region: Rect,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 5000,
            image_size: 32,
            disease_prevalence: 0.5,
            confounder_given_disease: 0.9,
            confounder_given_healthy: 0.1,
            marker_region: Rect::new(2, 6, 26, 30),
            blob_region: Rect::new(14, 26, 4, 18),
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

pub const BACKGROUND_AMPLITUDE: f64 = 0.3;
pub const BACKGROUND_BLUR_SIGMA: f64 = 3.0;
pub const BLOB_PEAK: f64 = 0.7;
pub const BLOB_SIGMA: f64 = 2.5;
pub const MARKER_VALUE: f32 = 0.9;

fn unit_interval(field: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(field, "must lie in [0, 1]"));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples", "must be positive"));
        }
        if self.image_size < 4 {
            return Err(Error::config("image_size", "must be at least 4"));
        }
        unit_interval("disease_prevalence", self.disease_prevalence)?;
        unit_interval("confounder_given_disease", self.confounder_given_disease)?;
        unit_interval("confounder_given_healthy", self.confounder_given_healthy)?;
        // equal rates are the unconfounded control
        if self.confounder_given_healthy > self.confounder_given_disease {
            return Err(Error::config(
                "confounder_given_healthy",
                "must not exceed confounder_given_disease",
            ));
        }
        if !self.marker_region.fits(self.image_size) {
            return Err(Error::config("marker_region", "must be non-empty and inside the image"));
        }
        if !self.blob_region.fits(self.image_size) {
            return Err(Error::config("blob_region", "must be non-empty and inside the image"));
        }
        if self.marker_region.overlaps(&self.blob_region) {
            return Err(Error::config("blob_region", "must be disjoint from marker_region"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        Ok(())
    }
}

/// One image with its labels. `confounder` is ground truth and is never
/// used for training.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `(1, size, size)` in [−1, 1].
    pub image: Tensor<f32>,
    pub disease: u8,
    pub confounder: u8,
}

pub fn record_id(i: usize) -> String {
    format!("{i:06}")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with wrap-around boundaries.
fn blur(img: &[f64], size: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let n = size as isize;
    let at = |i: isize| i.rem_euclid(n) as usize;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * img[y * size + at(x as isize + k as isize - r)])
                .sum();
        }
    }
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[at(y as isize + k as isize - r) * size + x])
                .sum();
        }
    }
    out
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Record `i`, drawn from its own stream so generation order is irrelevant.
pub fn gen_record(cfg: &SynthConfig, i: usize) -> SampleRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64);
    let s = cfg.image_size;
    let disease = rng.gen_bool(cfg.disease_prevalence);
    let rho = if disease {
        cfg.confounder_given_disease
    } else {
        cfg.confounder_given_healthy
    };
    let confounder = rng.gen_bool(rho);

    let white: Vec<f64> = (0..s * s).map(|_| normal(&mut rng)).collect();
    let mut img = blur(&white, s, &gaussian_kernel(BACKGROUND_BLUR_SIGMA));
    let peak = img.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    img.iter_mut().for_each(|v| *v *= BACKGROUND_AMPLITUDE / peak);

    if disease {
        let b = cfg.blob_region;
        let cy = rng.gen_range(b.row0 as f64..b.row1 as f64);
        let cx = rng.gen_range(b.col0 as f64..b.col1 as f64);
        for y in 0..s {
            for x in 0..s {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                img[y * s + x] += BLOB_PEAK * (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp();
            }
        }
    }
    if confounder {
        let m = cfg.marker_region;
        for y in m.row0..m.row1 {
            for x in m.col0..m.col1 {
                img[y * s + x] = MARKER_VALUE as f64;
            }
        }
    }
    let data = img
        .iter()
        .map(|&v| (v + cfg.noise_sigma * normal(&mut rng)).clamp(-1.0, 1.0) as f32)
        .collect();
    SampleRecord {
        id: record_id(i),
        image: Tensor::from_vec(&[1, s, s], data).expect("sized to image"),
        disease: disease as u8,
        confounder: confounder as u8,
    }
}

pub fn gen_dataset(cfg: &SynthConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    Ok((0..cfg.n_samples).into_par_iter().map(|i| gen_record(cfg, i)).collect())
}

/// Stacks record images into an `(n, 1, h, w)` batch.
pub fn stack_images(records: &[SampleRecord]) -> Result<Tensor<f32>> {
    let imgs: Vec<Tensor<f32>> = records.iter().map(|r| r.image.clone()).collect();
    Tensor::stack(&imgs)
}

/// Seeded split into `(train, held_out)` with `held_out` of the given size.
pub fn split_held_out(records: &[SampleRecord], held_out: usize, seed: u64) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    if held_out >= records.len() {
        return Err(Error::config("held_out", "must be smaller than the dataset"));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
    let (held, train) = idx.split_at(held_out);
    let mut train = train.to_vec();
    let mut held = held.to_vec();
    train.sort_unstable();
    held.sort_unstable();
    let pick = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect();
    Ok((pick(&train), pick(&held)))
}
