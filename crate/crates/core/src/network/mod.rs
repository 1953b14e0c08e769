//! Semantic encoder and z-conditioned denoising U-Net.
//!
//! The U-Net normalizes with GroupNorm followed by an adaptive scale and
//! shift. Inside the denoiser the scale/shift is the sum of a projection of
//! the timestep embedding and a projection of the semantic latent, so every
//! conditioned block sees both `t` and `z`. Encoder blocks use a learned,
//! unconditioned scale/shift instead.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{Checkpoint, CheckpointHeader, OptimizerBlobs, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ArchConfig;
pub use params::{ParamMeta, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::schedule::NoisePredictor;
use crate::tensor::{Float, Tensor};
use params::ParamBuilder;

#[derive(Clone, Debug)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

/// Learned `(1, 2c)` scale/shift applied after GroupNorm.
#[derive(Clone, Debug)]
struct Affine {
    ss: usize,
}

#[derive(Clone, Debug)]
struct Cond {
    time: Linear,
    latent: Linear,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: Affine,
    conv1: Conv,
    cond: Option<Cond>,
    norm2: Option<Affine>,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: Affine,
    qkv: Conv,
    proj: Conv,
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<ResBlock>,
    attn: Vec<AttnBlock>,
    resample: Option<Conv>,
}

#[derive(Clone, Debug)]
struct EncoderLayout {
    conv_in: Conv,
    stages: Vec<Stage>,
    norm_out: Affine,
    head: Linear,
}

#[derive(Clone, Debug)]
struct DenoiserLayout {
    time1: Linear,
    time2: Linear,
    conv_in: Conv,
    down: Vec<Stage>,
    mid: Vec<ResBlock>,
    mid_attn: Option<AttnBlock>,
    up: Vec<Stage>,
    norm_out: Affine,
    conv_out: Conv,
}

/// Parameter layout of the encoder/denoiser pair. Independent of the scalar
/// type, so the same network runs on f32 or f64 parameter stores.
#[derive(Clone, Debug)]
pub struct Network {
    arch: ArchConfig,
    encoder: EncoderLayout,
    denoiser: DenoiserLayout,
}

struct Builder<'a, R: rand::Rng> {
    p: ParamBuilder<'a, R>,
    arch: &'a ArchConfig,
}

impl<R: rand::Rng> Builder<'_, R> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan_in = cin * k * k;
        Conv {
            w: self.p.uniform(format!("{name}.weight"), &[cout, cin, k, k], fan_in),
            b: self.p.uniform(format!("{name}.bias"), &[cout], fan_in),
            stride,
            pad: k / 2,
        }
    }

    fn zero_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        Conv {
            w: self.p.zeros(format!("{name}.weight"), &[cout, cin, k, k]),
            b: self.p.zeros(format!("{name}.bias"), &[cout]),
            stride: 1,
            pad: k / 2,
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        Linear {
            w: self.p.uniform(format!("{name}.weight"), &[dout, din], din),
            b: self.p.uniform(format!("{name}.bias"), &[dout], din),
        }
    }

    fn affine(&mut self, name: &str, c: usize) -> Affine {
        Affine {
            ss: self.p.zeros(format!("{name}.scale_shift"), &[1, 2 * c]),
        }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, conditioned: bool) -> ResBlock {
        let norm1 = self.affine(&format!("{name}.norm1"), cin);
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3, 1);
        let (cond, norm2) = if conditioned {
            let time = self.linear(&format!("{name}.cond_time"), self.arch.time_embed_dim, 2 * cout);
            let latent = self.linear(&format!("{name}.cond_latent"), self.arch.latent_dim, 2 * cout);
            (Some(Cond { time, latent }), None)
        } else {
            (None, Some(self.affine(&format!("{name}.norm2"), cout)))
        };
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3, 1);
        let skip = (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1));
        ResBlock {
            norm1,
            conv1,
            cond,
            norm2,
            conv2,
            skip,
        }
    }

    fn attn(&mut self, name: &str, c: usize) -> AttnBlock {
        AttnBlock {
            norm: self.affine(&format!("{name}.norm"), c),
            qkv: self.conv(&format!("{name}.qkv"), c, 3 * c, 1, 1),
            proj: self.conv(&format!("{name}.proj"), c, c, 1, 1),
        }
    }

    fn encoder(&mut self) -> EncoderLayout {
        let a = self.arch;
        let conv_in = self.conv("enc.conv_in", a.in_channels, a.channels[0], 3, 1);
        let mut stages = Vec::new();
        let mut c = a.channels[0];
        for (l, &width) in a.channels.iter().enumerate() {
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for b in 0..a.res_blocks {
                blocks.push(self.res(&format!("enc.{l}.res{b}"), c, width, false));
                c = width;
                if a.attention[l] {
                    attn.push(self.attn(&format!("enc.{l}.attn{b}"), c));
                }
            }
            let resample = (l + 1 < a.levels()).then(|| self.conv(&format!("enc.{l}.down"), c, c, 3, 2));
            stages.push(Stage {
                blocks,
                attn,
                resample,
            });
        }
        let norm_out = self.affine("enc.norm_out", c);
        let head = self.linear("enc.head", c, a.latent_dim);
        EncoderLayout {
            conv_in,
            stages,
            norm_out,
            head,
        }
    }

    fn denoiser(&mut self) -> DenoiserLayout {
        let a = self.arch;
        let time1 = self.linear("unet.time1", a.time_features, a.time_embed_dim);
        let time2 = self.linear("unet.time2", a.time_embed_dim, a.time_embed_dim);
        let conv_in = self.conv("unet.conv_in", a.in_channels, a.channels[0], 3, 1);
        let mut down = Vec::new();
        let mut c = a.channels[0];
        for (l, &width) in a.channels.iter().enumerate() {
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for b in 0..a.res_blocks {
                blocks.push(self.res(&format!("unet.down{l}.res{b}"), c, width, true));
                c = width;
                if a.attention[l] {
                    attn.push(self.attn(&format!("unet.down{l}.attn{b}"), c));
                }
            }
            let resample = (l + 1 < a.levels()).then(|| self.conv(&format!("unet.down{l}.down"), c, c, 3, 2));
            down.push(Stage {
                blocks,
                attn,
                resample,
            });
        }
        let last = a.levels() - 1;
        let mid = vec![
            self.res("unet.mid.res0", c, c, true),
            self.res("unet.mid.res1", c, c, true),
        ];
        let mid_attn = a.attention[last].then(|| self.attn("unet.mid.attn", c));
        let mut up = Vec::new();
        for l in (0..a.levels()).rev() {
            let width = a.channels[l];
            let mut blocks = Vec::new();
            let mut attn = Vec::new();
            for b in 0..a.res_blocks {
                // the first block of each level consumes the matching skip
                let cin = if b == 0 { c + width } else { c };
                blocks.push(self.res(&format!("unet.up{l}.res{b}"), cin, width, true));
                c = width;
                if a.attention[l] {
                    attn.push(self.attn(&format!("unet.up{l}.attn{b}"), c));
                }
            }
            let resample = (l > 0).then(|| self.conv(&format!("unet.up{l}.up"), c, c, 3, 1));
            up.push(Stage {
                blocks,
                attn,
                resample,
            });
        }
        let norm_out = self.affine("unet.norm_out", c);
        let conv_out = self.zero_conv("unet.conv_out", c, a.in_channels, 3);
        DenoiserLayout {
            time1,
            time2,
            conv_in,
            down,
            mid,
            mid_attn,
            up,
            norm_out,
            conv_out,
        }
    }
}

/// Sinusoidal features of the timestep, `(n, dim)`.
pub fn timestep_features<T: Float>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t as f64;
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t * f).collect();
        data.extend(args.iter().map(|a| T::of(a.sin())));
        data.extend(args.iter().map(|a| T::of(a.cos())));
    }
    Tensor::from_vec(&[ts.len(), dim], data).expect("shape")
}

struct Ctx<'a, T: Float> {
    tape: &'a mut Tape<T>,
    p: &'a [Var],
    groups: usize,
}

impl<T: Float> Ctx<'_, T> {
    fn conv(&mut self, c: &Conv, x: Var) -> Result<Var> {
        self.tape.conv2d(x, self.p[c.w], self.p[c.b], c.stride, c.pad)
    }

    fn linear(&mut self, l: &Linear, x: Var) -> Result<Var> {
        self.tape.linear(x, self.p[l.w], self.p[l.b])
    }

    fn norm(&mut self, a: &Affine, x: Var) -> Result<Var> {
        let n = self.tape.group_norm(x, self.groups)?;
        self.tape.modulate(n, self.p[a.ss])
    }

    /// `cond` is `(silu(time embedding), z)` for conditioned blocks.
    fn res(&mut self, r: &ResBlock, x: Var, cond: Option<(Var, Var)>) -> Result<Var> {
        let h = self.norm(&r.norm1, x)?;
        let h = self.tape.silu(h);
        let h = self.conv(&r.conv1, h)?;
        let n = self.tape.group_norm(h, self.groups)?;
        let h = match (&r.cond, &r.norm2, cond) {
            (Some(c), _, Some((temb, z))) => {
                let st = self.linear(&c.time, temb)?;
                let sz = self.linear(&c.latent, z)?;
                let ss = self.tape.add(st, sz)?;
                self.tape.modulate(n, ss)?
            }
            (None, Some(a), _) => self.tape.modulate(n, self.p[a.ss])?,
            _ => return Err(Error::config("network", "conditioning missing for block")),
        };
        let h = self.tape.silu(h);
        let h = self.conv(&r.conv2, h)?;
        let skip = match &r.skip {
            Some(s) => self.conv(s, x)?,
            None => x,
        };
        self.tape.add(h, skip)
    }

    fn attn(&mut self, a: &AttnBlock, x: Var) -> Result<Var> {
        let h = self.norm(&a.norm, x)?;
        let qkv = self.conv(&a.qkv, h)?;
        let o = self.tape.attention(qkv)?;
        let o = self.conv(&a.proj, o)?;
        self.tape.add(x, o)
    }

    fn stage(&mut self, s: &Stage, mut h: Var, cond: Option<(Var, Var)>) -> Result<Var> {
        for (i, b) in s.blocks.iter().enumerate() {
            h = self.res(b, h, cond)?;
            if let Some(a) = s.attn.get(i) {
                h = self.attn(a, h)?;
            }
        }
        Ok(h)
    }
}

impl Network {
    /// Builds the layout and an initial f32 parameter store.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<(Network, ParamStore<f32>)> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            p: ParamBuilder {
                store: ParamStore::new(),
                rng: &mut rng,
            },
            arch,
        };
        let encoder = b.encoder();
        let denoiser = b.denoiser();
        let store = b.p.store;
        Ok((
            Network {
                arch: arch.clone(),
                encoder,
                denoiser,
            },
            store,
        ))
    }

    /// Layout for an existing store (e.g. one loaded from a checkpoint).
    pub fn for_params<T: Float>(arch: &ArchConfig, params: &ParamStore<T>) -> Result<Network> {
        let (net, fresh) = Network::init(arch, 0)?;
        if !fresh.same_layout(params) {
            return Err(Error::config(
                "params",
                "parameter names/shapes do not match the architecture",
            ));
        }
        Ok(net)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn check_images<T: Float>(&self, x: &Tensor<T>) -> Result<usize> {
        let a = &self.arch;
        let n = x.shape().first().copied().unwrap_or(0);
        let expect = [n, a.in_channels, a.image_size, a.image_size];
        if n == 0 || x.shape() != expect {
            return Err(Error::shape(&expect, x.shape()));
        }
        Ok(n)
    }

    /// Semantic encoder graph: images `(n, c, h, w)` to latents `(n, d)`.
    pub fn encoder_graph<T: Float>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        self.check_images(tape.value(x))?;
        let e = &self.encoder;
        let mut cx = Ctx {
            tape,
            p,
            groups: self.arch.groups,
        };
        let mut h = cx.conv(&e.conv_in, x)?;
        for s in &e.stages {
            h = cx.stage(s, h, None)?;
            if let Some(d) = &s.resample {
                h = cx.conv(d, h)?;
            }
        }
        let h = cx.norm(&e.norm_out, h)?;
        let h = cx.tape.silu(h);
        let h = cx.tape.mean_pool(h)?;
        cx.linear(&e.head, h)
    }

    /// Denoiser graph: predicts the noise in `x_t` at per-item steps `ts`,
    /// conditioned on latents `z: (n, d)`.
    pub fn denoiser_graph<T: Float>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        x_t: Var,
        ts: &[usize],
        z: Var,
    ) -> Result<Var> {
        let n = self.check_images(tape.value(x_t))?;
        if ts.len() != n {
            return Err(Error::shape(&[n], &[ts.len()]));
        }
        let zs = tape.value(z).shape();
        if zs != [n, self.arch.latent_dim] {
            return Err(Error::shape(&[n, self.arch.latent_dim], zs));
        }
        let d = &self.denoiser;
        let feats = tape.constant(timestep_features(ts, self.arch.time_features));
        let mut cx = Ctx {
            tape,
            p,
            groups: self.arch.groups,
        };
        let temb = cx.linear(&d.time1, feats)?;
        let temb = cx.tape.silu(temb);
        let temb = cx.linear(&d.time2, temb)?;
        let temb = cx.tape.silu(temb);
        let cond = Some((temb, z));

        let mut h = cx.conv(&d.conv_in, x_t)?;
        let mut skips = Vec::new();
        for s in &d.down {
            h = cx.stage(s, h, cond)?;
            skips.push(h);
            if let Some(r) = &s.resample {
                h = cx.conv(r, h)?;
            }
        }
        h = cx.res(&d.mid[0], h, cond)?;
        if let Some(a) = &d.mid_attn {
            h = cx.attn(a, h)?;
        }
        h = cx.res(&d.mid[1], h, cond)?;
        for s in &d.up {
            let skip = skips.pop().expect("one skip per level");
            h = cx.tape.concat_channels(h, skip)?;
            h = cx.stage(s, h, cond)?;
            if let Some(r) = &s.resample {
                h = cx.tape.upsample2x(h)?;
                h = cx.conv(r, h)?;
            }
        }
        let h = cx.norm(&d.norm_out, h)?;
        let h = cx.tape.silu(h);
        cx.conv(&d.conv_out, h)
    }

    /// Indices of the parameters that project `z` into the denoiser.
    pub fn latent_projection_params(&self) -> Vec<usize> {
        let d = &self.denoiser;
        d.down
            .iter()
            .chain(&d.up)
            .flat_map(|s| s.blocks.iter())
            .chain(&d.mid)
            .filter_map(|b| b.cond.as_ref())
            .flat_map(|c| [c.latent.w, c.latent.b])
            .collect()
    }

    /// Parameter indices owned by the semantic encoder (registered first).
    pub fn encoder_params(&self) -> std::ops::Range<usize> {
        0..self.encoder.head.b + 1
    }

    /// Index of the zero-initialized output convolution weight.
    pub fn output_conv(&self) -> (usize, usize) {
        (self.denoiser.conv_out.w, self.denoiser.conv_out.b)
    }
}

/// A network layout paired with its f32 parameters.
#[derive(Clone, Debug)]
pub struct DiffusionAutoencoder {
    net: Network,
    params: ParamStore<f32>,
}

impl DiffusionAutoencoder {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let (net, params) = Network::init(arch, seed)?;
        Ok(DiffusionAutoencoder { net, params })
    }

    pub fn from_params(arch: &ArchConfig, params: ParamStore<f32>) -> Result<Self> {
        let net = Network::for_params(arch, &params)?;
        Ok(DiffusionAutoencoder { net, params })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn arch(&self) -> &ArchConfig {
        self.net.arch()
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn ensure_finite(&self) -> Result<()> {
        if !self.params.is_finite() {
            return Err(Error::non_finite("model parameters"));
        }
        Ok(())
    }

    /// Deterministic semantic latents for a batch of images.
    pub fn encode_semantic(&self, x0: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.ensure_finite()?;
        let mut tape = Tape::new();
        let p: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let x = tape.constant(x0.clone());
        let z = self.net.encoder_graph(&mut tape, &p, x)?;
        let out = tape.value(z).clone();
        if !out.is_finite() {
            return Err(Error::non_finite("semantic latent"));
        }
        Ok(out)
    }

    /// Noise prediction with a separate step per batch item.
    pub fn predict_noise_at(&self, x_t: &Tensor<f32>, ts: &[usize], z: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.ensure_finite()?;
        let mut tape = Tape::new();
        let p: Vec<Var> = self
            .params
            .tensors()
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let x = tape.constant(x_t.clone());
        let zv = tape.constant(z.clone());
        let eps = self.net.denoiser_graph(&mut tape, &p, x, ts, zv)?;
        let out = tape.value(eps).clone();
        if !out.is_finite() {
            return Err(Error::non_finite("noise prediction"));
        }
        Ok(out)
    }

    /// Zeroes the projections of `z` into every conditioned block.
    pub fn sever_latent_conditioning(&mut self) {
        for i in self.net.latent_projection_params() {
            self.params.get_mut(i).data_mut().fill(0.0);
        }
    }
}

impl NoisePredictor for DiffusionAutoencoder {
    fn predict_noise(&self, x_t: &Tensor<f32>, t: usize, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let n = x_t.shape().first().copied().unwrap_or(0);
        self.predict_noise_at(x_t, &vec![t; n], z)
    }
}
