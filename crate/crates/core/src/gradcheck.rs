//! Finite-difference checks of the reverse-mode gradients in f64.
//!
//! Each case builds a scalar loss from random leaves; the analytic gradient
//! is compared against central differences on sampled coordinates and
//! along one random direction through all leaves jointly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::{ArchConfig, Network};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-3;
/// Below this magnitude differences are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;
const COORDS_PER_LEAF: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub seed: u64,
    pub compared: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= REL_TOL
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

pub fn randn(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let s: f64 = StandardNormal.sample(&mut *rng);
            scale * s
        })
        .collect();
    Tensor::from_vec(shape, v).expect("sized to shape")
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn eval(build: &Build<'_>, leaves: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value(loss).item(0)[0])
}

/// Compares analytic and numeric derivatives of `build` at `leaves`.
pub fn check(name: &str, seed: u64, leaves: Vec<Tensor<f64>>, build: &Build<'_>) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let grads: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&leaves)
        .map(|(&v, t)| grads.get(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut worst = 0.0f64;
    let mut compared = 0;
    let mut probe = leaves.clone();
    for li in 0..leaves.len() {
        let n = leaves[li].numel();
        for _ in 0..COORDS_PER_LEAF.min(n) {
            let j = rng.gen_range(0..n);
            let orig = leaves[li].data()[j];
            probe[li].data_mut()[j] = orig + FD_STEP;
            let up = eval(build, &probe)?;
            probe[li].data_mut()[j] = orig - FD_STEP;
            let down = eval(build, &probe)?;
            probe[li].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads[li].data()[j], numeric));
            compared += 1;
        }
    }

    let dirs: Vec<Tensor<f64>> = leaves.iter().map(|t| randn(t.shape(), 1.0, &mut rng)).collect();
    let shifted = |sign: f64| -> Vec<Tensor<f64>> {
        leaves
            .iter()
            .zip(&dirs)
            .map(|(t, d)| {
                let v = t.data().iter().zip(d.data()).map(|(a, b)| a + sign * FD_STEP * b).collect();
                Tensor::from_vec(t.shape(), v).expect("same shape")
            })
            .collect()
    };
    let numeric = (eval(build, &shifted(1.0))? - eval(build, &shifted(-1.0))?) / (2.0 * FD_STEP);
    let analytic: f64 = grads
        .iter()
        .zip(&dirs)
        .flat_map(|(g, d)| g.data().iter().zip(d.data()).map(|(a, b)| a * b))
        .sum();
    worst = worst.max(rel_err(analytic, numeric));
    compared += 1;

    if !worst.is_finite() {
        return Err(Error::non_finite(format!("gradient check {name}")));
    }
    Ok(GradCheck {
        name: name.to_string(),
        seed,
        compared,
        max_rel_err: worst,
    })
}

/// Mean-squared error against a fixed random target, so every output
/// element contributes a distinct weight.
fn score(tape: &mut Tape<f64>, out: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let target = randn(tape.value(out).shape(), 1.0, &mut rng);
    tape.mse(out, &target, None)
}

/// Checks of every tape primitive at one seed.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |s: &[usize], scale: f64| randn(s, scale, &mut rng);
    let ts = seed.wrapping_add(1);
    let mut out = Vec::new();

    for (stride, k) in [(1, 3), (2, 3), (1, 1)] {
        let leaves = vec![r(&[2, 3, 6, 6], 1.0), r(&[4, 3, k, k], 0.5), r(&[4], 0.5)];
        out.push(check(&format!("conv2d_k{k}_s{stride}"), seed, leaves, &|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, k / 2)?;
            score(t, y, ts)
        })?);
    }
    out.push(check("linear", seed, vec![r(&[3, 5], 1.0), r(&[4, 5], 0.5), r(&[4], 0.5)], &|t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        score(t, y, ts)
    })?);
    out.push(check("group_norm", seed, vec![r(&[2, 4, 3, 3], 1.0)], &|t, v| {
        let y = t.group_norm(v[0], 2)?;
        score(t, y, ts)
    })?);
    for rows in [1, 2] {
        let leaves = vec![r(&[2, 3, 4, 4], 1.0), r(&[rows, 6], 0.5)];
        out.push(check(&format!("modulate_rows{rows}"), seed, leaves, &|t, v| {
            let y = t.modulate(v[0], v[1])?;
            score(t, y, ts)
        })?);
    }
    out.push(check("silu", seed, vec![r(&[2, 3, 4], 2.0)], &|t, v| {
        let y = t.silu(v[0]);
        score(t, y, ts)
    })?);
    out.push(check("add", seed, vec![r(&[2, 3], 1.0), r(&[2, 3], 1.0)], &|t, v| {
        let y = t.add(v[0], v[1])?;
        score(t, y, ts)
    })?);
    out.push(check("concat_channels", seed, vec![r(&[2, 2, 3, 3], 1.0), r(&[2, 3, 3, 3], 1.0)], &|t, v| {
        let y = t.concat_channels(v[0], v[1])?;
        score(t, y, ts)
    })?);
    out.push(check("upsample2x", seed, vec![r(&[2, 2, 3, 3], 1.0)], &|t, v| {
        let y = t.upsample2x(v[0])?;
        score(t, y, ts)
    })?);
    out.push(check("mean_pool", seed, vec![r(&[2, 3, 4, 4], 1.0)], &|t, v| {
        let y = t.mean_pool(v[0])?;
        score(t, y, ts)
    })?);
    out.push(check("attention", seed, vec![r(&[2, 9, 3, 3], 1.0)], &|t, v| {
        let y = t.attention(v[0])?;
        score(t, y, ts)
    })?);
    let target = r(&[3, 2, 2, 2], 1.0);
    let weights: Vec<f64> = (0..3).map(|i| 0.5 + i as f64).collect();
    out.push(check("mse_weighted", seed, vec![r(&[3, 2, 2, 2], 1.0)], &|t, v| {
        t.mse(v[0], &target, Some(&weights))
    })?);
    out.push(check("sum_squares", seed, vec![r(&[2, 5], 1.0)], &|t, v| Ok(t.sum_squares(v[0])))?);
    Ok(out)
}

/// Composed encoder and denoiser of a tiny network, with all parameters,
/// the images and the latent as leaves. The zero-initialized output
/// convolution is re-randomized so gradient reaches the whole graph.
pub fn network_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let arch = ArchConfig::tiny(8);
    let (net, params) = Network::init(&arch, seed)?;
    let mut params = params.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    // learned affines and the output conv start at zero; move them off it
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            let s: f64 = StandardNormal.sample(&mut rng);
            *v += 0.1 * s;
        }
    }
    let n = 2;
    let x = randn(&[n, 1, 8, 8], 1.0, &mut rng);
    let z = randn(&[n, arch.latent_dim], 1.0, &mut rng);
    let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..1000)).collect();
    let np = params.len();
    let ts_seed = seed.wrapping_add(2);

    let mut leaves = params.tensors().to_vec();
    leaves.push(x.clone());
    let enc = check("encoder", seed, leaves.clone(), &|t, v| {
        let z = net.encoder_graph(t, &v[..np], v[np])?;
        score(t, z, ts_seed)
    })?;
    leaves.push(z);
    let den = check("denoiser", seed, leaves.clone(), &|t, v| {
        let e = net.denoiser_graph(t, &v[..np], v[np], &ts, v[np + 1])?;
        score(t, e, ts_seed)
    })?;
    leaves.pop();
    let joint = check("encoder_denoiser_joint", seed, leaves, &|t, v| {
        let z = net.encoder_graph(t, &v[..np], v[np])?;
        let e = net.denoiser_graph(t, &v[..np], v[np], &ts, z)?;
        score(t, e, ts_seed)
    })?;
    Ok(vec![enc, den, joint])
}
