//! Counterfactual explanations: move the standardized semantic latent along
//! a head's class direction, then regenerate the image from its own DDIM
//! noise map under the shifted latent.

mod montage;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Pgm;
use crate::error::{Error, Result, StageExt};
use crate::network::DiffusionAutoencoder;
use crate::schedule::{ddim_decode, ddim_encode, NoiseSchedule, DEFAULT_ENCODE_STEPS, DEFAULT_EXPLAIN_STEPS};
use crate::tensor::Tensor;
use crate::training::{normalize_latent, LatentStats, LogisticHead, NormalizedLatent};

pub use montage::{write_montage, MontageCell, MontageMeta};

pub const DEFAULT_EPSILON: f64 = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManipulationMode {
    /// `z − ε ∇_z BCE(h_k(z), 1)`.
    Gradient,
    /// `z + ε (1 − σ(w_kᵀz + b_k)) w_k`.
    ClosedFormFull,
    /// `z + ε w_k`.
    #[default]
    ClosedFormSimplified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipulationRequest {
    pub target_class: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub mode: ManipulationMode,
    #[serde(default = "default_encode_steps")]
    pub encode_steps: usize,
    #[serde(default = "default_decode_steps")]
    pub decode_steps: usize,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_encode_steps() -> usize {
    DEFAULT_ENCODE_STEPS
}

fn default_decode_steps() -> usize {
    DEFAULT_EXPLAIN_STEPS
}

impl ManipulationRequest {
    pub fn new(target_class: usize) -> Self {
        ManipulationRequest {
            target_class,
            epsilon: DEFAULT_EPSILON,
            mode: ManipulationMode::default(),
            encode_steps: DEFAULT_ENCODE_STEPS,
            decode_steps: DEFAULT_EXPLAIN_STEPS,
        }
    }

    pub fn validate(&self, classes: usize, timesteps: usize) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be finite and non-negative"));
        }
        if self.target_class >= classes {
            return Err(Error::config(
                "target_class",
                format!("{} is out of range for {classes} classes", self.target_class),
            ));
        }
        for (field, steps) in [("encode_steps", self.encode_steps), ("decode_steps", self.decode_steps)] {
            if steps == 0 || steps > timesteps {
                return Err(Error::config(field, format!("must lie in 1..={timesteps}")));
            }
        }
        Ok(())
    }
}

/// Moves a standardized latent towards the target class of `head`; the
/// target label is always 1 and other classes are ignored.
pub fn manipulate_latent(z: &NormalizedLatent, head: &LogisticHead, req: &ManipulationRequest) -> Result<NormalizedLatent> {
    head.check_latent(z)?;
    if req.target_class >= head.classes() {
        return Err(Error::config("target_class", "out of range for the head"));
    }
    if !(req.epsilon >= 0.0 && req.epsilon.is_finite()) {
        return Err(Error::config("epsilon", "must be finite and non-negative"));
    }
    let k = req.target_class;
    let eps = req.epsilon;
    let w = &head.w[k];
    let values = match req.mode {
        ManipulationMode::Gradient => {
            let g = head.class_bce_latent_gradient(&z.values, k, 1.0);
            z.values.iter().zip(&g).map(|(v, g)| v - eps * g).collect()
        }
        ManipulationMode::ClosedFormFull => {
            let r = 1.0 - crate::training::sigmoid(head.logit(&z.values, k));
            z.values.iter().zip(w).map(|(v, w)| v + eps * r * w).collect()
        }
        ManipulationMode::ClosedFormSimplified => z.values.iter().zip(w).map(|(v, w)| v + eps * w).collect(),
    };
    Ok(NormalizedLatent {
        values,
        fingerprint: z.fingerprint,
    })
}

/// Step factor that moves a latent `length` standardized units along the
/// target class's weight row under the closed-form simplified update.
pub fn epsilon_for_step_length(head: &LogisticHead, target_class: usize, length: f64) -> Result<f64> {
    if !(length >= 0.0 && length.is_finite()) {
        return Err(Error::config("step_length", "must be finite and non-negative"));
    }
    let w = head
        .w
        .get(target_class)
        .ok_or_else(|| Error::config("target_class", "out of range"))?;
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Undefined("target class has a zero weight row".into()));
    }
    Ok(length / norm)
}

/// Largest step factor tried by [`calibrate_epsilon`].
pub const MAX_CALIBRATED_EPSILON: f64 = 1e6;

/// Smallest ε for which the mean target-class probability of the
/// manipulated latents reaches `target_prob`, found by bisection (the mean
/// probability is non-decreasing in ε for every mode).
pub fn calibrate_epsilon(
    latents: &[NormalizedLatent],
    head: &LogisticHead,
    req: &ManipulationRequest,
    target_prob: f64,
) -> Result<f64> {
    if latents.is_empty() {
        return Err(Error::config("latents", "need at least one"));
    }
    if !(target_prob > 0.0 && target_prob < 1.0) {
        return Err(Error::config("target_probability", "must lie in (0, 1)"));
    }
    let k = req.target_class;
    let mean_prob = |eps: f64| -> Result<f64> {
        let r = ManipulationRequest { epsilon: eps, ..req.clone() };
        let mut sum = 0.0;
        for z in latents {
            sum += crate::training::sigmoid(head.logit(&manipulate_latent(z, head, &r)?.values, k));
        }
        Ok(sum / latents.len() as f64)
    };
    if mean_prob(0.0)? >= target_prob {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while mean_prob(hi)? < target_prob {
        hi *= 2.0;
        if hi > MAX_CALIBRATED_EPSILON {
            return Err(Error::Undefined(format!("no step factor reaches probability {target_prob}")));
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-9 * hi {
        let mid = 0.5 * (lo + hi);
        if mean_prob(mid)? >= target_prob {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMeta {
    pub seed: u64,
    pub target_class_name: String,
    pub request: ManipulationRequest,
    pub z: Vec<f64>,
    pub z_star: Vec<f64>,
    pub prob_before: f64,
    pub prob_after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    /// `(1, h, w)` in [−1, 1].
    pub source: Tensor<f32>,
    pub counterfactual: Tensor<f32>,
    pub meta: ExplanationMeta,
}

impl Explanation {
    /// Writes `source.pgm`, `counterfactual.pgm` and `meta.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let comments = [format!("seed={}", self.meta.seed)];
        crate::data::write_pgm(&dir.join("source.pgm"), &Pgm::from_image(&self.source)?, &comments)?;
        crate::data::write_pgm(
            &dir.join("counterfactual.pgm"),
            &Pgm::from_image(&self.counterfactual)?,
            &comments,
        )?;
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_string_pretty(&self.meta)? + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn latent_rows(z: &Tensor<f32>) -> Vec<Vec<f64>> {
    z.unstack()
        .iter()
        .map(|r| r.data().iter().map(|&v| v as f64).collect())
        .collect()
}

/// Explanations for a batch `(n, c, h, w)` sharing one request. The shifted
/// latent is applied to the encoder output as `z + Δ·std`, which equals
/// denormalizing `z*` and is exactly `z` when nothing moved.
pub fn generate_explanations(
    x0: &Tensor<f32>,
    model: &DiffusionAutoencoder,
    head: &LogisticHead,
    stats: &LatentStats,
    req: &ManipulationRequest,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Explanation>> {
    head.validate()?;
    req.validate(head.classes(), sched.len()).stage("request")?;
    let z = model.encode_semantic(x0).stage("encode_semantic")?;
    let mut z_star_raw = z.clone();
    let mut metas = Vec::new();
    for (i, raw) in latent_rows(&z).into_iter().enumerate() {
        let zn = normalize_latent(&raw, stats).stage("normalize")?;
        let zs = manipulate_latent(&zn, head, req).stage("manipulate")?;
        for ((dst, (a, b)), s) in z_star_raw
            .item_mut(i)
            .iter_mut()
            .zip(zs.values.iter().zip(&zn.values))
            .zip(&stats.std)
        {
            *dst = (*dst as f64 + (a - b) * s) as f32;
        }
        let k = req.target_class;
        metas.push(ExplanationMeta {
            seed,
            target_class_name: head.class_names[k].clone(),
            request: req.clone(),
            prob_before: crate::training::sigmoid(head.logit(&zn.values, k)),
            prob_after: crate::training::sigmoid(head.logit(&zs.values, k)),
            z: zn.values,
            z_star: zs.values,
        });
    }
    let x_t = ddim_encode(x0, &z, req.encode_steps, model, sched).stage("ddim_encode")?;
    let cf = ddim_decode(&x_t, &z_star_raw, req.decode_steps, model, sched).stage("ddim_decode")?;
    Ok(x0
        .unstack()
        .into_iter()
        .zip(cf.unstack())
        .zip(metas)
        .map(|((source, counterfactual), meta)| Explanation {
            source,
            counterfactual,
            meta,
        })
        .collect())
}

/// Single-image form of [`generate_explanations`]; `x0` is `(c, h, w)`.
pub fn generate_explanation(
    x0: &Tensor<f32>,
    model: &DiffusionAutoencoder,
    head: &LogisticHead,
    stats: &LatentStats,
    req: &ManipulationRequest,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Explanation> {
    let batch = Tensor::stack(std::slice::from_ref(x0))?;
    Ok(generate_explanations(&batch, model, head, stats, req, sched, seed)?.remove(0))
}

/// Encode to `x_T` with the unmodified latent and decode in `steps` steps.
pub fn reconstruct(
    x0: &Tensor<f32>,
    model: &DiffusionAutoencoder,
    sched: &NoiseSchedule,
    encode_steps: usize,
    steps: usize,
) -> Result<Tensor<f32>> {
    let z = model.encode_semantic(x0).stage("encode_semantic")?;
    let x_t = ddim_encode(x0, &z, encode_steps, model, sched).stage("ddim_encode")?;
    ddim_decode(&x_t, &z, steps, model, sched).stage("ddim_decode")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ArchConfig;
    use crate::schedule::ScheduleConfig;
    use crate::training::compute_latent_stats;

    fn head(fingerprint: u64) -> LogisticHead {
        LogisticHead {
            w: vec![vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]],
            b: vec![0.1, -0.3],
            class_names: vec!["disease".into(), "other".into()],
            stats_fingerprint: fingerprint,
        }
    }

    fn latent(fingerprint: u64) -> NormalizedLatent {
        NormalizedLatent {
            values: vec![0.2, -0.4, 0.9],
            fingerprint,
        }
    }

    fn req(mode: ManipulationMode, epsilon: f64) -> ManipulationRequest {
        ManipulationRequest {
            mode,
            epsilon,
            ..ManipulationRequest::new(1)
        }
    }

    #[test]
    fn zero_epsilon_is_identity() {
        for mode in [
            ManipulationMode::Gradient,
            ManipulationMode::ClosedFormFull,
            ManipulationMode::ClosedFormSimplified,
        ] {
            let z = latent(7);
            assert_eq!(manipulate_latent(&z, &head(7), &req(mode, 0.0)).unwrap(), z);
        }
    }

    #[test]
    fn gradient_equals_closed_form_full() {
        let g = manipulate_latent(&latent(7), &head(7), &req(ManipulationMode::Gradient, 0.3)).unwrap();
        let f = manipulate_latent(&latent(7), &head(7), &req(ManipulationMode::ClosedFormFull, 0.3)).unwrap();
        for (a, b) in g.values.iter().zip(&f.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn simplified_step_and_logit_gain() {
        let h = head(7);
        let z = latent(7);
        let zs = manipulate_latent(&z, &h, &req(ManipulationMode::ClosedFormSimplified, 0.3)).unwrap();
        for ((s, v), w) in zs.values.iter().zip(&z.values).zip(&h.w[1]) {
            assert!((s - (v + 0.3 * w)).abs() < 1e-15);
        }
        let norm2: f64 = h.w[1].iter().map(|w| w * w).sum();
        let gain = h.logit(&zs.values, 1) - h.logit(&z.values, 1);
        assert!((gain - 0.3 * norm2).abs() < 1e-5);
        // other classes' rows are not used
        let mut h2 = h.clone();
        h2.w[0] = vec![9.0; 3];
        assert_eq!(manipulate_latent(&z, &h2, &req(ManipulationMode::ClosedFormSimplified, 0.3)).unwrap(), zs);
    }

    #[test]
    fn direction_is_scale_invariant() {
        let h = head(7);
        let mut scaled = h.clone();
        scaled.w.iter_mut().flatten().for_each(|w| *w *= 3.5);
        scaled.b.iter_mut().for_each(|b| *b *= 3.5);
        let z = latent(7);
        let r = req(ManipulationMode::ClosedFormSimplified, 0.3);
        let dir = |h: &LogisticHead| {
            let zs = manipulate_latent(&z, h, &r).unwrap();
            let d: Vec<f64> = zs.values.iter().zip(&z.values).map(|(a, b)| a - b).collect();
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            (d.into_iter().map(|v| v / n).collect::<Vec<_>>(), n)
        };
        let (d1, n1) = dir(&h);
        let (d2, n2) = dir(&scaled);
        for (a, b) in d1.iter().zip(&d2) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((n2 / n1 - 3.5).abs() < 1e-9);
    }

    #[test]
    fn rejects_foreign_latent_and_bad_requests() {
        assert!(manipulate_latent(&latent(8), &head(7), &req(ManipulationMode::Gradient, 0.3)).is_err());
        let mut r = req(ManipulationMode::Gradient, 0.3);
        r.target_class = 2;
        assert!(manipulate_latent(&latent(7), &head(7), &r).is_err());
        assert!(req(ManipulationMode::Gradient, -0.1).validate(2, 1000).is_err());
        let mut r = req(ManipulationMode::Gradient, 0.1);
        r.encode_steps = 1001;
        assert!(r.validate(2, 1000).is_err());
    }

    #[test]
    fn step_length_sets_the_latent_displacement() {
        let h = head(7);
        let z = NormalizedLatent {
            values: vec![0.2, -0.4, 1.0],
            fingerprint: 7,
        };
        let eps = epsilon_for_step_length(&h, 1, 5.0).unwrap();
        let m = manipulate_latent(&z, &h, &req(ManipulationMode::ClosedFormSimplified, eps)).unwrap();
        let d = m.values.iter().zip(&z.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!((d - 5.0).abs() < 1e-12, "{d}");
        assert!(epsilon_for_step_length(&h, 1, -1.0).is_err());
        assert!(epsilon_for_step_length(&h, 9, 1.0).is_err());
    }

    #[test]
    fn calibrated_epsilon_reaches_the_target_probability() {
        let h = head(7);
        let zs: Vec<NormalizedLatent> = (0..5)
            .map(|i| NormalizedLatent {
                values: vec![-1.0 + 0.3 * i as f64, 0.5, -0.2 * i as f64],
                fingerprint: 7,
            })
            .collect();
        for mode in [ManipulationMode::ClosedFormSimplified, ManipulationMode::ClosedFormFull] {
            let r = req(mode, 0.0);
            let eps = calibrate_epsilon(&zs, &h, &r, 0.9).unwrap();
            let mean = |e: f64| {
                zs.iter()
                    .map(|z| {
                        let m = manipulate_latent(z, &h, &ManipulationRequest { epsilon: e, ..r.clone() }).unwrap();
                        crate::training::sigmoid(h.logit(&m.values, 1))
                    })
                    .sum::<f64>()
                    / zs.len() as f64
            };
            assert!(mean(eps) >= 0.9 && mean(eps * (1.0 - 1e-6)) < 0.9, "{mode:?}: {eps}");
        }
        assert_eq!(calibrate_epsilon(&zs, &h, &req(ManipulationMode::Gradient, 0.0), 0.01).unwrap(), 0.0);
        let mut flat = h.clone();
        flat.w[1] = vec![0.0; 3];
        assert!(calibrate_epsilon(&zs, &flat, &req(ManipulationMode::ClosedFormSimplified, 0.0), 0.9).is_err());
    }

    #[test]
    fn zero_epsilon_explanation_is_the_reconstruction() {
        let arch = ArchConfig::tiny(8);
        let mut model = DiffusionAutoencoder::new(&arch, 3).unwrap();
        // a nonzero output layer so the pipeline is not trivially static
        let (w, _) = model.network().output_conv();
        model.params_mut().get_mut(w).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * (i % 5) as f32);
        let sched = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let x0 = Tensor::from_vec(&[3, 1, 8, 8], (0..192).map(|i| ((i * 7) % 19) as f32 / 9.5 - 1.0).collect()).unwrap();
        let zs: Vec<Vec<f64>> = latent_rows(&model.encode_semantic(&x0).unwrap());
        let stats = compute_latent_stats(&zs).unwrap();
        let mut h = LogisticHead::zeros(vec!["disease".into()], arch.latent_dim, stats.fingerprint());
        h.w[0] = vec![1.0, -0.5, 0.25];
        let r = ManipulationRequest {
            epsilon: 0.0,
            encode_steps: 20,
            decode_steps: 10,
            ..ManipulationRequest::new(0)
        };
        let ex = generate_explanations(&x0, &model, &h, &stats, &r, &sched, 1).unwrap();
        let rec = reconstruct(&x0, &model, &sched, 20, 10).unwrap();
        for (e, r) in ex.iter().zip(rec.unstack()) {
            assert_eq!(e.counterfactual, r);
            assert_eq!(e.meta.prob_before, e.meta.prob_after);
        }
        let r2 = ManipulationRequest { epsilon: 0.3, ..r };
        let ex2 = generate_explanations(&x0, &model, &h, &stats, &r2, &sched, 1).unwrap();
        assert!(ex2.iter().all(|e| e.meta.prob_after > e.meta.prob_before));
        assert!(ex2.iter().all(|e| e.counterfactual.data().iter().all(|v| (-1.0..=1.0).contains(v))));
        let dir = tempfile::tempdir().unwrap();
        ex2[0].save(dir.path()).unwrap();
        for f in ["source.pgm", "counterfactual.pgm", "meta.json"] {
            assert!(dir.path().join(f).exists());
        }
    }
}
