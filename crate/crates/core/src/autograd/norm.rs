//! Group normalization and the adaptive scale-and-shift that conditions it.

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const GROUP_NORM_EPS: f64 = 1e-5;

impl<T: Float> Tape<T> {
    /// Group normalization without affine parameters over `(n, c, ...)`.
    pub fn group_norm(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 || groups == 0 || shape[1] % groups != 0 {
            return Err(Error::config(
                "group_norm",
                format!("{groups} groups do not divide shape {shape:?}"),
            ));
        }
        let n = shape[0];
        let block = xv.numel() / (n * groups);
        let eps = T::of(GROUP_NORM_EPS);
        let mut out = Tensor::zeros(&shape);
        let mut rstd = Vec::with_capacity(n * groups);
        let inv_m = T::one() / T::of(block as f64);
        for (src, dst) in xv.data().chunks(block).zip(out.data_mut().chunks_mut(block)) {
            let mean = src.iter().copied().sum::<T>() * inv_m;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let r = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::GroupNorm { x, rstd }, rg))
    }

    /// `h * (1 + scale) + shift` per channel, where `ss` is `(n or 1, 2c)`
    /// holding the scales followed by the shifts.
    pub fn modulate(&mut self, h: Var, ss: Var) -> Result<Var> {
        let (hv, sv) = (self.value(h), self.value(ss));
        let shape = hv.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let (m, two_c) = sv.dims2();
        if two_c != 2 * c || (m != 1 && m != n) {
            return Err(Error::shape(&[n, 2 * c], sv.shape()));
        }
        let l = hv.numel() / (n * c);
        let mut out = Tensor::zeros(&shape);
        for i in 0..n {
            let row = &sv.data()[(if m == 1 { 0 } else { i }) * two_c..][..two_c];
            for ch in 0..c {
                let off = (i * c + ch) * l;
                let scale = T::one() + row[ch];
                let shift = row[c + ch];
                for (o, &v) in out.data_mut()[off..off + l]
                    .iter_mut()
                    .zip(&hv.data()[off..off + l])
                {
                    *o = v * scale + shift;
                }
            }
        }
        let rg = self.rg(h) || self.rg(ss);
        Ok(self.push(out, Op::Modulate { h, ss }, rg))
    }
}

pub(super) fn group_norm_backward<T: Float>(
    x: Var,
    rstd: &[T],
    y: &Tensor<T>,
    grad: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let block = y.numel() / rstd.len();
    let inv_m = T::one() / T::of(block as f64);
    sink.with(x, |dx| {
        for (gi, ((yb, gb), db)) in y
            .data()
            .chunks(block)
            .zip(grad.chunks(block))
            .zip(dx.chunks_mut(block))
            .enumerate()
        {
            let mean_g = gb.iter().copied().sum::<T>() * inv_m;
            let mean_gy = gb.iter().zip(yb).map(|(&a, &b)| a * b).sum::<T>() * inv_m;
            let r = rstd[gi];
            for ((d, &gv), &yv) in db.iter_mut().zip(gb).zip(yb) {
                *d += r * (gv - mean_g - yv * mean_gy);
            }
        }
    });
}

pub(super) fn modulate_backward<T: Float>(
    tape: &Tape<T>,
    h: Var,
    ss: Var,
    grad: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (hv, sv) = (tape.value(h), tape.value(ss));
    let shape = hv.shape();
    let (n, c) = (shape[0], shape[1]);
    let (m, two_c) = sv.dims2();
    let l = hv.numel() / (n * c);
    let row_of = |i: usize| if m == 1 { 0 } else { i };
    sink.with(h, |dh| {
        for i in 0..n {
            let row = &sv.data()[row_of(i) * two_c..][..two_c];
            for ch in 0..c {
                let off = (i * c + ch) * l;
                let scale = T::one() + row[ch];
                for (d, &g) in dh[off..off + l].iter_mut().zip(&grad[off..off + l]) {
                    *d += g * scale;
                }
            }
        }
    });
    sink.with(ss, |ds| {
        for i in 0..n {
            let r = row_of(i) * two_c;
            for ch in 0..c {
                let off = (i * c + ch) * l;
                let gs = &grad[off..off + l];
                let hs = &hv.data()[off..off + l];
                ds[r + ch] += gs.iter().zip(hs).map(|(&g, &v)| g * v).sum::<T>();
                ds[r + c + ch] += gs.iter().copied().sum::<T>();
            }
        }
    });
}
