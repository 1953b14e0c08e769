//! Noise schedules, the closed-form forward process and deterministic DDIM
//! kernels.
//!
//! Indices are zero-based: `alpha_bar[t] = Π_{s≤t} (1 − beta[s])`, and the
//! clean image sits "before" step 0 with `alpha_bar = 1`.
//!
//! DDIM step pairing: encoding moves `τ_{i−1} → τ_i` with the noise predicted
//! at `(x_{τ_{i−1}}, τ_{i−1})` (the clean image is evaluated at `τ_0`);
//! decoding moves `τ_i → τ_{i−1}` with the noise predicted at `(x_{τ_i}, τ_i)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Number of DDIM steps used to invert an image into its noise map.
pub const DEFAULT_ENCODE_STEPS: usize = 250;
/// Number of DDIM steps used to render an explanation.
pub const DEFAULT_EXPLAIN_STEPS: usize = 200;
/// Number of DDIM steps used for reconstructions.
pub const DEFAULT_RECONSTRUCT_STEPS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear variance schedule with cumulative products.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(&ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        })
    }

    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        } = *config;
        if steps < 2 {
            return Err(Error::config("schedule.steps", "need at least 2 steps"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::config("schedule.beta_start", "must lie in (0, 1)"));
        }
        if !(beta_end > 0.0 && beta_end < 1.0) {
            return Err(Error::config("schedule.beta_end", "must lie in (0, 1)"));
        }
        if beta_start > beta_end {
            return Err(Error::config(
                "schedule.beta_end",
                "betas must be non-decreasing (beta_start <= beta_end)",
            ));
        }
        let last = (steps - 1) as f64;
        let beta: Vec<f64> = (0..steps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / last)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            config: config.clone(),
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// The sampler never injects noise.
    pub fn ddim_eta(&self) -> f64 {
        0.0
    }

    /// Cumulative product at `t`, with `None` standing for the clean image.
    fn abar(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bar[t])
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::config(
                "t",
                format!("step {t} outside [0, {})", self.len()),
            ));
        }
        Ok(())
    }

    /// Uniformly strided sub-sequence of `steps` indices over `[0, T)`,
    /// always containing 0 and `T − 1`.
    pub fn strided_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.len();
        if steps > t {
            return Err(Error::config(
                "steps",
                format!("{steps} steps exceed the schedule length {t}"),
            ));
        }
        if steps < 2 {
            return Err(Error::config("steps", "need at least 2 sampling steps"));
        }
        let span = (t - 1) as f64 / (steps - 1) as f64;
        Ok((0..steps).map(|i| (i as f64 * span).round() as usize).collect())
    }
}

fn combine<T: Float>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64) -> Result<Tensor<T>> {
    a.ensure_shape(b.shape())?;
    let (ca, cb) = (T::of(ca), T::of(cb));
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ca * x + cb * y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
pub fn q_sample<T: Float>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar[t];
    combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Batched [`q_sample`] with one step index per leading-axis item.
pub fn q_sample_batch<T: Float>(
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    x0.ensure_shape(eps.shape())?;
    if ts.len() != x0.shape()[0] {
        return Err(Error::shape(&[x0.shape()[0]], &[ts.len()]));
    }
    let item = x0.numel() / ts.len();
    let mut out = Tensor::zeros(x0.shape());
    for (i, &t) in ts.iter().enumerate() {
        sched.check_step(t)?;
        let ab = sched.alpha_bar[t];
        let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
        let r = i * item..(i + 1) * item;
        for ((o, &x), &e) in out.data_mut()[r.clone()]
            .iter_mut()
            .zip(&x0.data()[r.clone()])
            .zip(&eps.data()[r])
        {
            *o = a * x + b * e;
        }
    }
    Ok(out)
}

/// One Markov forward step from index `t − 1` (or the clean image when
/// `t = 0`) to `t`: `√α_t · x + √β_t · noise`.
pub fn forward_step<T: Float>(
    x_prev: &Tensor<T>,
    t: usize,
    noise: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    combine(x_prev, sched.alpha[t].sqrt(), noise, sched.beta[t].sqrt())
}

/// Mean of the deterministic reverse kernel at `t`: the clean-image estimate
/// `(x_t − √(1 − ᾱ_t) · eps) / √ᾱ_t`.
pub fn reverse_mean<T: Float>(
    x_t: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar[t];
    combine(x_t, 1.0 / ab.sqrt(), eps, -(1.0 - ab).sqrt() / ab.sqrt())
}

/// Deterministic DDIM move from `t` down to `prev` (`None` = clean image).
pub fn ddim_step<T: Float>(
    x_t: &Tensor<T>,
    t: usize,
    prev: Option<usize>,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if let Some(p) = prev {
        sched.check_step(p)?;
    }
    let x0 = reverse_mean(x_t, t, eps, sched)?;
    let ab_prev = sched.abar(prev);
    combine(&x0, ab_prev.sqrt(), eps, (1.0 - ab_prev).sqrt())
}

/// Deterministic DDIM move upward from `from` (`None` = clean image) to `to`.
pub fn ddim_inverse_step<T: Float>(
    x: &Tensor<T>,
    from: Option<usize>,
    to: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_step(to)?;
    let x0 = match from {
        Some(f) => reverse_mean(x, f, eps, sched)?,
        None => x.clone(),
    };
    let ab = sched.alpha_bar[to];
    combine(&x0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Anything that predicts the noise in a batch `x_t` at a shared step `t`,
/// conditioned on per-item semantic latents `z: (n, d)`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor<f32>, t: usize, z: &Tensor<f32>) -> Result<Tensor<f32>>;
}

fn checked_eps<P: NoisePredictor + ?Sized>(
    model: &P,
    x: &Tensor<f32>,
    t: usize,
    z: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let eps = model.predict_noise(x, t, z)?;
    x.ensure_shape(eps.shape())?;
    if !eps.is_finite() {
        return Err(Error::non_finite(format!("noise prediction at step {t}")));
    }
    Ok(eps)
}

/// Deterministically inverts clean images into their terminal noise maps.
pub fn ddim_encode<P: NoisePredictor + ?Sized>(
    x0: &Tensor<f32>,
    z: &Tensor<f32>,
    steps: usize,
    model: &P,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    let taus = sched.strided_timesteps(steps)?;
    let mut x = x0.clone();
    let mut from: Option<usize> = None;
    for &t in &taus {
        let eps = checked_eps(model, &x, from.unwrap_or(t), z)?;
        x = ddim_inverse_step(&x, from, t, &eps, sched)?;
        from = Some(t);
    }
    Ok(x)
}

/// Deterministically decodes noise maps into images, clamping the final
/// output to `[-1, 1]`.
pub fn ddim_decode<P: NoisePredictor + ?Sized>(
    x_t: &Tensor<f32>,
    z: &Tensor<f32>,
    steps: usize,
    model: &P,
    sched: &NoiseSchedule,
) -> Result<Tensor<f32>> {
    let taus = sched.strided_timesteps(steps)?;
    let mut x = x_t.clone();
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let prev = i.checked_sub(1).map(|j| taus[j]);
        let eps = checked_eps(model, &x, t, z)?;
        x = ddim_step(&x, t, prev, &eps, sched)?;
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}
