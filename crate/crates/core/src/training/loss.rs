//! The simplified diffusion objective and its VLB-weighted variant.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::network::{Network, ParamStore};
use crate::schedule::{q_sample_batch, NoiseSchedule};
use crate::tensor::{Float, Tensor};

/// Per-example timesteps and noise drawn for one batch.
#[derive(Clone, Debug)]
pub struct Noising<T> {
    pub ts: Vec<usize>,
    pub eps: Tensor<T>,
    pub x_t: Tensor<T>,
}

/// Draws `t ~ U[0, T)` per example (all timesteps first), then standard
/// normal noise for the whole batch, and forms `x_t`.
pub fn draw_noising<T: Float, R: Rng>(x0: &Tensor<T>, sched: &NoiseSchedule, rng: &mut R) -> Result<Noising<T>> {
    let n = x0.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::config("batch", "empty batch"));
    }
    let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..sched.len())).collect();
    let eps_data = (0..x0.numel())
        .map(|_| T::of(StandardNormal.sample(rng)))
        .collect();
    let eps = Tensor::from_vec(x0.shape(), eps_data)?;
    let x_t = q_sample_batch(x0, &ts, &eps, sched)?;
    Ok(Noising { ts, eps, x_t })
}

/// `(1 − α_t)² / (2 α_t (1 − ᾱ_t) σ²)` with a constant `σ²`.
pub fn vlb_weight(sched: &NoiseSchedule, t: usize, sigma_sq: f64) -> f64 {
    let a = sched.alpha()[t];
    let one_minus_abar = (1.0 - sched.alpha_bar()[t]).max(1e-12);
    (1.0 - a).powi(2) / (2.0 * a * one_minus_abar * sigma_sq)
}

/// Per-example weighting of the squared noise error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossWeighting {
    /// The simplified objective.
    Simple,
    /// VLB weights with `‖Σ‖²` replaced by the given constant.
    Vlb { sigma_sq: f64 },
    /// Every weight forced to one; must match [`LossWeighting::Simple`].
    Unit,
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: f64,
    /// One gradient per parameter, encoder and denoiser jointly.
    pub grads: Vec<Tensor<T>>,
    pub noising: Noising<T>,
}

impl<T: Float> LossOutput<T> {
    /// L2 norm of the gradients over a parameter index range.
    pub fn grad_norm(&self, range: std::ops::Range<usize>) -> f64 {
        self.grads[range]
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v.as_f64().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Loss and exact gradients for one batch: the latent is computed from the
/// clean images inside the same graph, so the encoder receives gradient
/// through the noise prediction.
pub fn diffusion_loss_weighted<T: Float, R: Rng>(
    net: &Network,
    params: &ParamStore<T>,
    x0: &Tensor<T>,
    sched: &NoiseSchedule,
    weighting: LossWeighting,
    rng: &mut R,
) -> Result<LossOutput<T>> {
    let noising = draw_noising(x0, sched, rng)?;
    let weights: Option<Vec<T>> = match weighting {
        LossWeighting::Simple => None,
        LossWeighting::Unit => Some(vec![T::one(); noising.ts.len()]),
        LossWeighting::Vlb { sigma_sq } => Some(
            noising
                .ts
                .iter()
                .map(|&t| T::of(vlb_weight(sched, t, sigma_sq)))
                .collect(),
        ),
    };
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let clean = tape.constant(x0.clone());
    let z = net.encoder_graph(&mut tape, &p, clean)?;
    let xt = tape.constant(noising.x_t.clone());
    let pred = net.denoiser_graph(&mut tape, &p, xt, &noising.ts, z)?;
    let loss = tape.mse(pred, &noising.eps, weights.as_deref())?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::non_finite("diffusion loss"));
    }
    let g = tape.backward(loss)?;
    let grads = p
        .iter()
        .map(|&v| g.get(v).expect("parameters are differentiable leaves"))
        .collect();
    Ok(LossOutput {
        loss: value,
        grads,
        noising,
    })
}

/// The simplified objective: mean over the batch of the per-element squared
/// noise error.
pub fn diffusion_loss<T: Float, R: Rng>(
    net: &Network,
    params: &ParamStore<T>,
    x0: &Tensor<T>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossOutput<T>> {
    diffusion_loss_weighted(net, params, x0, sched, LossWeighting::Simple, rng)
}

/// VLB-weighted objective with `‖Σ‖² = sigma_sq`.
pub fn weighted_vlb_loss<T: Float, R: Rng>(
    net: &Network,
    params: &ParamStore<T>,
    x0: &Tensor<T>,
    sched: &NoiseSchedule,
    sigma_sq: f64,
    rng: &mut R,
) -> Result<LossOutput<T>> {
    diffusion_loss_weighted(net, params, x0, sched, LossWeighting::Vlb { sigma_sq }, rng)
}
