//! Per-dimension standardization of semantic latents.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest standard deviation used when standardizing.
pub const STD_FLOOR: f64 = 1e-6;

/// Mean and (floored, n−1) standard deviation of a latent set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A latent expressed in standardized units, tagged with the statistics
/// that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedLatent {
    pub values: Vec<f64>,
    pub fingerprint: u64,
}

impl LatentStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// FNV-1a over the bit patterns of the statistics.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.mean.iter().chain(&self.std) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

pub fn compute_latent_stats(latents: &[Vec<f64>]) -> Result<LatentStats> {
    if latents.len() < 2 {
        return Err(Error::config("latents", "need at least 2 latents for statistics"));
    }
    let d = latents[0].len();
    if latents.iter().any(|z| z.len() != d) {
        return Err(Error::config("latents", "latents differ in dimension"));
    }
    let n = latents.len() as f64;
    let mut mean = vec![0.0; d];
    for z in latents {
        for (m, v) in mean.iter_mut().zip(z) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for z in latents {
        for ((s, v), m) in var.iter_mut().zip(z).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let mut floored = 0;
    let std = var
        .iter()
        .map(|s| {
            let sd = (s / (n - 1.0)).sqrt();
            if sd < STD_FLOOR {
                floored += 1;
                STD_FLOOR
            } else {
                sd
            }
        })
        .collect();
    if floored > 0 {
        log::warn!("{floored} latent dimension(s) have ~zero variance; std floored at {STD_FLOOR}");
    }
    Ok(LatentStats { mean, std })
}

pub fn normalize_latent(z: &[f64], stats: &LatentStats) -> Result<NormalizedLatent> {
    if z.len() != stats.dim() {
        return Err(Error::shape(&[stats.dim()], &[z.len()]));
    }
    Ok(NormalizedLatent {
        values: z
            .iter()
            .zip(&stats.mean)
            .zip(&stats.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect(),
        fingerprint: stats.fingerprint(),
    })
}

pub fn denormalize_latent(z: &NormalizedLatent, stats: &LatentStats) -> Result<Vec<f64>> {
    if z.fingerprint != stats.fingerprint() {
        return Err(Error::config("latent", "normalized with different statistics"));
    }
    Ok(z
        .values
        .iter()
        .zip(&stats.mean)
        .zip(&stats.std)
        .map(|((v, m), s)| v * s + m)
        .collect())
}
