use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Float> Tape<T> {
    /// `x · wᵀ + b` for `x: (n, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, din) = xv.dims2();
        let (dout, win) = wv.dims2();
        if win != din {
            return Err(Error::shape(&[dout, din], wv.shape()));
        }
        bv.ensure_shape(&[dout])?;
        let mut out = Tensor::zeros(&[n, dout]);
        for row in out.data_mut().chunks_mut(dout) {
            row.copy_from_slice(bv.data());
        }
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            xv.data(),
            (din, 1),
            wv.data(),
            (1, din),
            T::one(),
            out.data_mut(),
            (dout, 1),
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// Concatenates two `(n, c_i, ...)` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(sa, sb));
        }
        let n = sa[0];
        let (ia, ib) = (av.numel() / n, bv.numel() / n);
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * ia..(i + 1) * ia]);
            data.extend_from_slice(&bv.data()[i * ib..(i + 1) * ib]);
        }
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let src = xv.data();
        let dst = out.data_mut();
        for p in 0..n * c {
            for y in 0..2 * h {
                let srow = &src[(p * h + y / 2) * w..][..w];
                let drow = &mut dst[(p * 2 * h + y) * 2 * w..][..2 * w];
                for (xo, d) in drow.iter_mut().enumerate() {
                    *d = srow[xo / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample2x { x }, rg))
    }

    /// Global average over the spatial axes: `(n, c, h, w) -> (n, c)`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let l = h * w;
        let inv = T::one() / T::of(l as f64);
        let data = xv
            .data()
            .chunks(l)
            .map(|s| s.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanPool { x }, rg))
    }

    /// Mean squared error against a constant target, averaged over every
    /// element. Optional per-item weights multiply each item's squared-error
    /// sum before averaging; unit weights reproduce the unweighted value
    /// exactly.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>, weights: Option<&[T]>) -> Result<Var> {
        let pv = self.value(pred);
        pv.ensure_shape(target.shape())?;
        let n = pv.shape()[0];
        if let Some(w) = weights {
            if w.len() != n {
                return Err(Error::shape(&[n], &[w.len()]));
            }
        }
        let item = pv.numel() / n;
        let mut total = T::zero();
        for i in 0..n {
            let s: T = pv.data()[i * item..(i + 1) * item]
                .iter()
                .zip(&target.data()[i * item..(i + 1) * item])
                .map(|(&p, &q)| (p - q) * (p - q))
                .sum();
            total += match weights {
                Some(w) => w[i] * s,
                None => T::one() * s,
            };
        }
        let loss = total / T::of(pv.numel() as f64);
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::full(&[1], loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
                weights: weights.map(|w| w.to_vec()),
            },
            rg,
        ))
    }
}

pub(super) fn linear_backward<T: Float>(
    tape: &Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    grad: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (xv, wv) = (tape.value(x), tape.value(w));
    let (n, din) = xv.dims2();
    let dout = wv.dims2().0;
    sink.with(x, |dx| {
        T::gemm(n, dout, din, T::one(), grad, (dout, 1), wv.data(), (din, 1), T::one(), dx, (din, 1));
    });
    sink.with(w, |dw| {
        T::gemm(dout, n, din, T::one(), grad, (1, dout), xv.data(), (din, 1), T::one(), dw, (din, 1));
    });
    sink.with(b, |db| {
        for row in grad.chunks(dout) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
    });
}

pub(super) fn silu_backward<T: Float>(tape: &Tape<T>, x: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
    let xv = tape.value(x).data();
    sink.with(x, |dx| {
        for ((d, &g), &v) in dx.iter_mut().zip(grad).zip(xv) {
            let s = sigmoid(v);
            *d += g * s * (T::one() + v * (T::one() - s));
        }
    });
}

pub(super) fn concat_backward<T: Float>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    grad: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let n = tape.value(a).shape()[0];
    let ia = tape.value(a).numel() / n;
    let ib = tape.value(b).numel() / n;
    sink.with(a, |da| {
        for i in 0..n {
            for (d, &g) in da[i * ia..(i + 1) * ia].iter_mut().zip(&grad[i * (ia + ib)..]) {
                *d += g;
            }
        }
    });
    sink.with(b, |db| {
        for i in 0..n {
            for (d, &g) in db[i * ib..(i + 1) * ib]
                .iter_mut()
                .zip(&grad[i * (ia + ib) + ia..])
            {
                *d += g;
            }
        }
    });
}

pub(super) fn upsample_backward<T: Float>(
    tape: &Tape<T>,
    x: Var,
    grad: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (n, c, h, w) = tape.value(x).dims4();
    sink.with(x, |dx| {
        for p in 0..n * c {
            for y in 0..2 * h {
                let grow = &grad[(p * 2 * h + y) * 2 * w..][..2 * w];
                let drow = &mut dx[(p * h + y / 2) * w..][..w];
                for (xo, &g) in grow.iter().enumerate() {
                    drow[xo / 2] += g;
                }
            }
        }
    });
}

pub(super) fn mean_pool_backward<T: Float>(
    tape: &Tape<T>,
    x: Var,
    grad: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (_, _, h, w) = tape.value(x).dims4();
    let l = h * w;
    let inv = T::one() / T::of(l as f64);
    sink.with(x, |dx| {
        for (block, &g) in dx.chunks_mut(l).zip(grad) {
            for d in block {
                *d += g * inv;
            }
        }
    });
}

pub(super) fn mse_backward<T: Float>(
    tape: &Tape<T>,
    pred: Var,
    target: &[T],
    weights: Option<&[T]>,
    grad: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let pv = tape.value(pred);
    let n = pv.shape()[0];
    let item = pv.numel() / n;
    let base = grad[0] * T::of(2.0) / T::of(pv.numel() as f64);
    sink.with(pred, |dp| {
        for i in 0..n {
            let c = match weights {
                Some(w) => base * w[i],
                None => base,
            };
            let r = i * item..(i + 1) * item;
            for ((d, &p), &q) in dp[r.clone()].iter_mut().zip(&pv.data()[r.clone()]).zip(&target[r]) {
                *d += c * (p - q);
            }
        }
    });
}
