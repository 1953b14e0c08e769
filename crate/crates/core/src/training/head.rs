//! Multi-label logistic head over standardized latents.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState, OptimizerConfig};
use super::latent::NormalizedLatent;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Independent sigmoid outputs, one row of `w` per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticHead {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub class_names: Vec<String>,
    /// Fingerprint of the latent statistics the head was trained under.
    pub stats_fingerprint: u64,
}

impl LogisticHead {
    pub fn zeros(class_names: Vec<String>, dim: usize, stats_fingerprint: u64) -> Self {
        LogisticHead {
            w: vec![vec![0.0; dim]; class_names.len()],
            b: vec![0.0; class_names.len()],
            class_names,
            stats_fingerprint,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.w.len() != self.b.len() || self.class_names.len() != self.b.len() {
            return Err(Error::config("head", "class count mismatch between w, b and names"));
        }
        if self.w.iter().any(|r| r.len() != d) {
            return Err(Error::config("head.w", "rows differ in length"));
        }
        if !self.w.iter().flatten().chain(&self.b).all(|v| v.is_finite()) {
            return Err(Error::non_finite("head parameters"));
        }
        Ok(())
    }

    pub fn check_latent(&self, z: &NormalizedLatent) -> Result<()> {
        if z.fingerprint != self.stats_fingerprint {
            return Err(Error::config(
                "latent",
                "latent was not normalized with the statistics this head was trained on",
            ));
        }
        if z.values.len() != self.dim() {
            return Err(Error::shape(&[self.dim()], &[z.values.len()]));
        }
        Ok(())
    }

    pub fn logit(&self, z: &[f64], class: usize) -> f64 {
        self.w[class].iter().zip(z).map(|(w, v)| w * v).sum::<f64>() + self.b[class]
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        (0..self.classes()).map(|k| self.logit(z, k)).collect()
    }

    pub fn probs(&self, z: &[f64]) -> Vec<f64> {
        self.logits(z).into_iter().map(sigmoid).collect()
    }

    /// Mean binary cross-entropy over classes for one example.
    pub fn bce(&self, z: &[f64], y: &[u8]) -> f64 {
        self.logits(z)
            .iter()
            .zip(y)
            .map(|(&l, &t)| {
                // log(1 + e^l) − t·l, computed stably
                let softplus = if l > 0.0 { l + (-l).exp().ln_1p() } else { l.exp().ln_1p() };
                softplus - t as f64 * l
            })
            .sum::<f64>()
            / self.classes() as f64
    }

    /// Binary cross-entropy of a single class.
    pub fn class_bce(&self, z: &[f64], class: usize, y: f64) -> f64 {
        let l = self.logit(z, class);
        let softplus = if l > 0.0 { l + (-l).exp().ln_1p() } else { l.exp().ln_1p() };
        softplus - y * l
    }

    /// Gradient of [`Self::class_bce`] with respect to the latent:
    /// `(σ(w_kᵀz + b_k) − y)·w_k`.
    pub fn class_bce_latent_gradient(&self, z: &[f64], class: usize, y: f64) -> Vec<f64> {
        let r = sigmoid(self.logit(z, class)) - y;
        self.w[class].iter().map(|w| r * w).collect()
    }

    /// Closed-form gradient of [`Self::bce`]: `(σ(wᵀz + b) − y)·z` per class
    /// (and `σ − y` for the bias), scaled by `1/classes`.
    pub fn bce_gradient(&self, z: &[f64], y: &[u8]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let c = self.classes() as f64;
        let mut gw = Vec::with_capacity(self.classes());
        let mut gb = Vec::with_capacity(self.classes());
        for k in 0..self.classes() {
            let r = (sigmoid(self.logit(z, k)) - y[k] as f64) / c;
            gw.push(z.iter().map(|v| r * v).collect());
            gb.push(r);
        }
        (gw, gb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of examples held out for early stopping; 0 disables it.
    pub val_fraction: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            lr: 1e-3,
            epochs: 200,
            batch_size: 64,
            val_fraction: 0.1,
            patience: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadFit {
    pub head: LogisticHead,
    /// Classes without a single positive example.
    pub zero_positive: Vec<String>,
    pub epochs_run: usize,
    pub best_val_bce: Option<f64>,
    /// Mean training BCE of each epoch, measured before each batch update.
    pub train_curve: Vec<f64>,
    /// Examples per epoch after the validation split.
    pub train_examples: usize,
}

fn mean_bce(head: &LogisticHead, zs: &[&[f64]], ys: &[&[u8]]) -> f64 {
    zs.iter().zip(ys).map(|(z, y)| head.bce(z, y)).sum::<f64>() / zs.len().max(1) as f64
}

/// Trains a logistic head with Adam on mean BCE; deterministic given the seed.
pub fn fit_head(
    latents: &[NormalizedLatent],
    labels: &[Vec<u8>],
    class_names: &[String],
    cfg: &HeadConfig,
) -> Result<HeadFit> {
    if latents.is_empty() || latents.len() != labels.len() {
        return Err(Error::config("finetune", "need equally many latents and label rows"));
    }
    let classes = class_names.len();
    if labels.iter().any(|y| y.len() != classes || y.iter().any(|&v| v > 1)) {
        return Err(Error::config("labels", "labels must be 0/1 with one column per class"));
    }
    let fingerprint = latents[0].fingerprint;
    if latents.iter().any(|z| z.fingerprint != fingerprint) {
        return Err(Error::config("latents", "latents normalized with different statistics"));
    }
    let dim = latents[0].values.len();
    let zero_positive: Vec<String> = (0..classes)
        .filter(|&k| labels.iter().all(|y| y[k] == 0))
        .map(|k| class_names[k].clone())
        .collect();
    for c in &zero_positive {
        log::warn!("class {c} has no positive examples; training anyway");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..latents.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if latents.len() >= 10 {
        ((latents.len() as f64) * cfg.val_fraction).round() as usize
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_z: Vec<&[f64]> = val_idx.iter().map(|&i| latents[i].values.as_slice()).collect();
    let val_y: Vec<&[u8]> = val_idx.iter().map(|&i| labels[i].as_slice()).collect();

    let mut head = LogisticHead::zeros(class_names.to_vec(), dim, fingerprint);
    let opt = OptimizerConfig {
        lr: cfg.lr,
        batch_size: cfg.batch_size.max(1),
        ..OptimizerConfig::default()
    };
    let pack = |h: &LogisticHead| {
        vec![
            Tensor::from_vec(&[classes, dim], h.w.concat()).expect("shape"),
            Tensor::from_vec(&[classes], h.b.clone()).expect("shape"),
        ]
    };
    let mut params = pack(&head);
    let mut state = AdamState::new(&params);
    let mut best: Option<(f64, LogisticHead)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut train_curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        epochs_run += 1;
        train_idx.shuffle(&mut rng);
        let mut epoch_bce = 0.0;
        for batch in train_idx.chunks(opt.batch_size) {
            epoch_bce += batch.iter().map(|&i| head.bce(&latents[i].values, &labels[i])).sum::<f64>();
            let mut gw = vec![0.0; classes * dim];
            let mut gb = vec![0.0; classes];
            for &i in batch {
                let (w, b) = head.bce_gradient(&latents[i].values, &labels[i]);
                for (acc, v) in gw.iter_mut().zip(w.concat()) {
                    *acc += v;
                }
                for (acc, v) in gb.iter_mut().zip(b) {
                    *acc += v;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let grads = vec![
                Tensor::from_vec(&[classes, dim], gw.iter().map(|v| v * inv).collect())?,
                Tensor::from_vec(&[classes], gb.iter().map(|v| v * inv).collect())?,
            ];
            adam_step(&mut params, &grads, &mut state, &opt)?;
            head.w = params[0].data().chunks(dim).map(<[f64]>::to_vec).collect();
            head.b = params[1].data().to_vec();
        }
        train_curve.push(epoch_bce / train_idx.len().max(1) as f64);
        if n_val > 0 {
            let v = mean_bce(&head, &val_z, &val_y);
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, head.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    let best_val_bce = best.as_ref().map(|(v, _)| *v);
    if let Some((_, h)) = best {
        head = h;
    }
    head.validate()?;
    Ok(HeadFit {
        head,
        zero_positive,
        epochs_run,
        best_val_bce,
        train_curve,
        train_examples: train_idx.len(),
    })
}
