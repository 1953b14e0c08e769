use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the semantic encoder and the conditioned denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Channel width per resolution level, highest resolution first.
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    /// Global attention per resolution level.
    pub attention: Vec<bool>,
    pub groups: usize,
    pub latent_dim: usize,
    /// Width of the sinusoidal timestep features.
    pub time_features: usize,
    /// Width of the projected timestep embedding.
    pub time_embed_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 32,
            in_channels: 1,
            channels: vec![32, 64, 128],
            res_blocks: 2,
            attention: vec![false, false, true],
            groups: 8,
            latent_dim: 32,
            time_features: 64,
            time_embed_dim: 128,
        }
    }
}

impl ArchConfig {
    /// Reduced network sized for single-core CPU training runs.
    pub fn desk() -> Self {
        ArchConfig {
            channels: vec![12, 24, 48],
            res_blocks: 1,
            groups: 4,
            time_embed_dim: 64,
            ..Self::default()
        }
    }

    /// Tiny network used by gradient checks and smoke tests.
    pub fn tiny(image_size: usize) -> Self {
        ArchConfig {
            image_size,
            in_channels: 1,
            channels: vec![4, 8],
            res_blocks: 1,
            attention: vec![false, true],
            groups: 2,
            latent_dim: 3,
            time_features: 8,
            time_embed_dim: 8,
        }
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config("arch.channels", "need at least one level"));
        }
        if self.attention.len() != self.channels.len() {
            return Err(Error::config(
                "arch.attention",
                "one flag per resolution level required",
            ));
        }
        if self.groups == 0 || self.channels.iter().any(|c| c % self.groups != 0) {
            return Err(Error::config(
                "arch.groups",
                "every channel width must be divisible by the group count",
            ));
        }
        let down = 1usize << (self.channels.len() - 1);
        if self.image_size == 0 || self.image_size % down != 0 {
            return Err(Error::config(
                "arch.image_size",
                format!("must be a positive multiple of {down}"),
            ));
        }
        if self.in_channels == 0 || self.res_blocks == 0 || self.latent_dim == 0 {
            return Err(Error::config("arch", "widths and block counts must be positive"));
        }
        if self.time_features < 2 || self.time_features % 2 != 0 || self.time_embed_dim == 0 {
            return Err(Error::config("arch.time_features", "must be even and positive"));
        }
        Ok(())
    }
}
