//! Binary checkpoint format.
//!
//! ```text
//! b"DFXC" | u32 version | u64 header length | JSON header
//! then, per blob in header order: u64 byte length | little-endian f32 data
//! ```
//! Blobs are the parameters in declaration order, followed (when present)
//! by the optimizer's first moments and then its second moments.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ParamMeta, ParamStore};
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;
use crate::tensor::Tensor;
use crate::training::{LatentStats, LogisticHead};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFXC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub images_shown: u64,
    pub params: Vec<ParamMeta>,
    #[serde(default)]
    pub optimizer_step: Option<u64>,
    #[serde(default)]
    pub latent_stats: Option<LatentStats>,
    #[serde(default)]
    pub head: Option<LogisticHead>,
}

/// Adam moments, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerBlobs {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerBlobs>,
}

fn write_blob(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(&((t.numel() * 4) as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "unexpected end of checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn blob(&mut self, meta: &ParamMeta) -> Result<Tensor<f32>> {
        let len = self.u64()? as usize;
        let numel: usize = meta.shape.iter().product();
        if len != numel * 4 {
            return Err(Error::format(
                self.path,
                format!("blob {} has {len} bytes, expected {}", meta.name, numel * 4),
            ));
        }
        let bytes = self.take(len)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(&meta.shape, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.header.optimizer_step.is_some() != self.optimizer.is_some() {
            return Err(Error::config(
                "checkpoint.optimizer_step",
                "optimizer step and optimizer moments must be saved together",
            ));
        }
        if self.header.params != self.params.metas() {
            return Err(Error::config("checkpoint.params", "header does not describe the parameters"));
        }
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.tensors() {
            write_blob(&mut out, t);
        }
        if let Some(opt) = &self.optimizer {
            for t in opt.m.iter().chain(&opt.v) {
                write_blob(&mut out, t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad magic bytes"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)?;
        let tensors = header
            .params
            .iter()
            .map(|m| r.blob(m))
            .collect::<Result<Vec<_>>>()?;
        let params = ParamStore::from_parts(header.params.clone(), tensors)?;
        let optimizer = if header.optimizer_step.is_some() {
            let m = header.params.iter().map(|p| r.blob(p)).collect::<Result<Vec<_>>>()?;
            let v = header.params.iter().map(|p| r.blob(p)).collect::<Result<Vec<_>>>()?;
            Some(OptimizerBlobs { m, v })
        } else {
            None
        };
        if r.pos != buf.len() {
            return Err(Error::format(path, "trailing bytes after last blob"));
        }
        Ok(Checkpoint {
            header,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::DiffusionAutoencoder;
    use crate::training::{compute_latent_stats, LogisticHead};

    fn sample(with_optimizer: bool) -> Checkpoint {
        let arch = ArchConfig::tiny(8);
        let model = DiffusionAutoencoder::new(&arch, 4).unwrap();
        let stats = compute_latent_stats(&[vec![0.1, 1.0 / 3.0, 2.0f64.sqrt()], vec![-0.7, 0.2, std::f64::consts::PI]]).unwrap();
        let head = LogisticHead::zeros(vec!["disease".into()], 3, stats.fingerprint());
        let params = model.params().clone();
        let optimizer = with_optimizer.then(|| OptimizerBlobs {
            m: params.tensors().iter().map(|t| t.map(|v| v * 0.5)).collect(),
            v: params.tensors().iter().map(|t| t.map(|v| v * v)).collect(),
        });
        Checkpoint {
            header: CheckpointHeader {
                arch,
                schedule: ScheduleConfig::default(),
                seed: 4,
                images_shown: 123,
                params: params.metas().to_vec(),
                optimizer_step: with_optimizer.then_some(7),
                latent_stats: Some(stats),
                head: Some(head),
            },
            params,
            optimizer,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for opt in [false, true] {
            let c = sample(opt);
            let bytes = c.to_bytes().unwrap();
            assert_eq!(&bytes[..4], b"DFXC");
            let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes().unwrap(), bytes);
            let stats = back.header.latent_stats.unwrap();
            assert_eq!(stats.fingerprint(), back.header.head.unwrap().stats_fingerprint);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample(true);
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample(false).to_bytes().unwrap();
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, p).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad, p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long, p).is_err());
    }

    #[test]
    fn optimizer_state_must_match_header() {
        let mut c = sample(true);
        c.optimizer = None;
        assert!(c.to_bytes().is_err());
    }
}
