//! Joint encoder/denoiser pretraining measured in images shown.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState, OptimizerConfig};
use super::loss::{diffusion_loss_weighted, LossWeighting};
use crate::error::{Error, Result};
use crate::network::{ArchConfig, Checkpoint, CheckpointHeader, DiffusionAutoencoder, OptimizerBlobs};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tensor::Tensor;

pub const LOSS_CSV_HEADER: &str = "images_shown,loss";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub seed: u64,
    pub arch: ArchConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    /// Total training budget.
    pub images_shown: u64,
    /// Image counts at which a checkpoint is written.
    pub milestones: Vec<u64>,
    /// Steps averaged for the initial/final rolling loss.
    pub rolling_window: usize,
    /// `None` trains the simplified objective; `Some(c)` the VLB-weighted
    /// one with `‖Σ‖² = c`.
    pub vlb_sigma_sq: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            seed: 0,
            arch: ArchConfig::desk(),
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerConfig::default(),
            images_shown: 500_000,
            milestones: vec![500_000],
            rolling_window: 1000,
            vlb_sigma_sq: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.optimizer.validate()?;
        NoiseSchedule::new(&self.schedule)?;
        if self.rolling_window == 0 {
            return Err(Error::config("rolling_window", "must be positive"));
        }
        if let Some(s) = self.vlb_sigma_sq {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("vlb_sigma_sq", "must be positive"));
            }
        }
        Ok(())
    }

    fn weighting(&self) -> LossWeighting {
        match self.vlb_sigma_sq {
            None => LossWeighting::Simple,
            Some(sigma_sq) => LossWeighting::Vlb { sigma_sq },
        }
    }
}

/// Stream for optimizer step `step`: independent of how the run was split
/// across resumptions.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub images_shown: u64,
    pub encoder_grad_norm: f64,
}

/// Model, optimizer state and progress counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: PretrainConfig,
    sched: NoiseSchedule,
    model: DiffusionAutoencoder,
    adam: AdamState<f32>,
    images_shown: u64,
}

impl Trainer {
    pub fn new(cfg: &PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = DiffusionAutoencoder::new(&cfg.arch, cfg.seed)?;
        let adam = AdamState::new(model.params().tensors());
        Ok(Trainer {
            cfg: cfg.clone(),
            sched: NoiseSchedule::new(&cfg.schedule)?,
            model,
            adam,
            images_shown: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: &PretrainConfig, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let h = &ckpt.header;
        if h.arch != cfg.arch || h.schedule != cfg.schedule || h.seed != cfg.seed {
            return Err(Error::config(
                "resume",
                "checkpoint arch/schedule/seed differ from the training config",
            ));
        }
        let (step, blobs) = match (h.optimizer_step, ckpt.optimizer) {
            (Some(s), Some(b)) => (s, b),
            _ => return Err(Error::config("resume", "checkpoint carries no optimizer state")),
        };
        let images_shown = h.images_shown;
        let model = DiffusionAutoencoder::from_params(&cfg.arch, ckpt.params)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            sched: NoiseSchedule::new(&cfg.schedule)?,
            model,
            adam: AdamState {
                step,
                m: blobs.m,
                v: blobs.v,
            },
            images_shown,
        })
    }

    pub fn model(&self) -> &DiffusionAutoencoder {
        &self.model
    }

    pub fn into_model(self) -> DiffusionAutoencoder {
        self.model
    }

    pub fn images_shown(&self) -> u64 {
        self.images_shown
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// One optimizer step on a batch drawn with replacement from `data`.
    /// On a non-finite loss or gradient nothing is modified.
    pub fn step(&mut self, data: &Tensor<f32>) -> Result<StepReport> {
        let (n, c, h, w) = data.dims4();
        if n == 0 {
            return Err(Error::config("dataset", "no images"));
        }
        let bs = self.cfg.optimizer.batch_size;
        let mut rng = step_rng(self.cfg.seed, self.adam.step);
        let mut batch = Vec::with_capacity(bs * c * h * w);
        for _ in 0..bs {
            batch.extend_from_slice(data.item(rng.gen_range(0..n)));
        }
        let x0 = Tensor::from_vec(&[bs, c, h, w], batch)?;
        let out = diffusion_loss_weighted(
            self.model.network(),
            self.model.params(),
            &x0,
            &self.sched,
            self.cfg.weighting(),
            &mut rng,
        )?;
        if !out.grads.iter().all(|g| g.is_finite()) {
            return Err(Error::non_finite("parameter gradient"));
        }
        let encoder_grad_norm = out.grad_norm(self.model.network().encoder_params());
        adam_step(
            self.model.params_mut().tensors_mut(),
            &out.grads,
            &mut self.adam,
            &self.cfg.optimizer,
        )?;
        self.images_shown += bs as u64;
        Ok(StepReport {
            loss: out.loss,
            images_shown: self.images_shown,
            encoder_grad_norm,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                arch: self.cfg.arch.clone(),
                schedule: self.cfg.schedule.clone(),
                seed: self.cfg.seed,
                images_shown: self.images_shown,
                params: self.model.params().metas().to_vec(),
                optimizer_step: Some(self.adam.step),
                latent_stats: None,
                head: None,
            },
            params: self.model.params().clone(),
            optimizer: Some(OptimizerBlobs {
                m: self.adam.m.clone(),
                v: self.adam.v.clone(),
            }),
        }
    }
}

/// Mean of the first and of the last `window` entries.
pub fn rolling_endpoints(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    if losses.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

#[derive(Debug)]
pub struct PretrainSummary {
    pub model: DiffusionAutoencoder,
    pub images_shown: u64,
    pub steps: u64,
    /// Losses of the steps run in this invocation.
    pub losses: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub fn milestone_path(dir: &Path, images: u64) -> PathBuf {
    dir.join(format!("milestone_{images:09}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";
pub const LOSS_CSV: &str = "loss.csv";

fn loss_writer(dir: &Path, seed: u64, append: bool) -> Result<BufWriter<File>> {
    let path = dir.join(LOSS_CSV);
    if append && path.exists() {
        let f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        return Ok(BufWriter::new(f));
    }
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "# seed={seed}").and_then(|_| writeln!(w, "{LOSS_CSV_HEADER}")).map_err(|e| Error::io(&path, e))?;
    Ok(w)
}

/// Trains until `cfg.images_shown`, writing `loss.csv`, milestone
/// checkpoints and `model.ckpt` under `out_dir`. A non-finite step writes
/// `last_good.ckpt` from the state before that step and returns the error.
pub fn pretrain(
    data: &Tensor<f32>,
    cfg: &PretrainConfig,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<PretrainSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let resumed = resume.is_some();
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(cfg, ckpt)?,
        None => Trainer::new(cfg)?,
    };
    let (_, c, h, w) = data.dims4();
    let a = &cfg.arch;
    if data.shape().len() != 4 || c != a.in_channels || h != a.image_size || w != a.image_size {
        return Err(Error::shape(&[0, a.in_channels, a.image_size, a.image_size], data.shape()));
    }
    let csv_path = out_dir.join(LOSS_CSV);
    let mut csv = loss_writer(out_dir, cfg.seed, resumed)?;
    let mut losses = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.images_shown() < cfg.images_shown {
        let before = trainer.images_shown();
        let report = match trainer.step(data) {
            Ok(r) => r,
            Err(e) => {
                let path = out_dir.join(LAST_GOOD_CHECKPOINT);
                trainer.checkpoint().save(&path)?;
                log::error!("aborting at {before} images shown; last good state in {}", path.display());
                return Err(e.at("pretrain"));
            }
        };
        writeln!(csv, "{},{}", report.images_shown, report.loss).map_err(|e| Error::io(&csv_path, e))?;
        losses.push(report.loss);
        if trainer.step_count() % 500 == 0 {
            log::info!(
                "images {} loss {:.5} |grad_enc| {:.3e}",
                report.images_shown,
                report.loss,
                report.encoder_grad_norm
            );
        }
        for &m in &cfg.milestones {
            if before < m && report.images_shown >= m {
                let path = milestone_path(out_dir, m);
                trainer.checkpoint().save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(PretrainSummary {
        images_shown: trainer.images_shown(),
        steps: trainer.step_count(),
        losses,
        checkpoints,
        final_checkpoint,
        model: trainer.into_model(),
    })
}
