//! Single-head global self-attention over spatial positions.

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

impl<T: Float> Tape<T> {
    /// `qkv` is `(n, 3c, h, w)` holding queries, keys and values stacked on
    /// the channel axis; returns `(n, c, h, w)`.
    pub fn attention(&mut self, qkv: Var) -> Result<Var> {
        let v = self.value(qkv);
        let (n, c3, h, w) = v.dims4();
        if c3 % 3 != 0 {
            return Err(Error::config("attention", "channel count not divisible by 3"));
        }
        let c = c3 / 3;
        let l = h * w;
        let scale = T::one() / T::of(c as f64).sqrt();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut probs = vec![T::zero(); n * l * l];
        for i in 0..n {
            let item = v.item(i);
            let (q, rest) = item.split_at(c * l);
            let (k, val) = rest.split_at(c * l);
            let p = &mut probs[i * l * l..(i + 1) * l * l];
            // scores[i][j] = Σ_c q[c][i] k[c][j] / √c
            T::gemm(l, c, l, scale, q, (1, l), k, (l, 1), T::zero(), p, (l, 1));
            for row in p.chunks_mut(l) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for e in row.iter_mut() {
                    *e = (*e - m).exp();
                    s += *e;
                }
                let inv = T::one() / s;
                for e in row.iter_mut() {
                    *e *= inv;
                }
            }
            // out[c][i] = Σ_j v[c][j] p[i][j]
            T::gemm(c, l, l, T::one(), val, (l, 1), p, (1, l), T::zero(), out.item_mut(i), (l, 1));
        }
        let rg = self.rg(qkv);
        Ok(self.push(out, Op::Attention { qkv, probs }, rg))
    }
}

pub(super) fn attention_backward<T: Float>(
    tape: &Tape<T>,
    qkv: Var,
    probs: &[T],
    grad: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let v = tape.value(qkv);
    let (n, c3, h, w) = v.dims4();
    let c = c3 / 3;
    let l = h * w;
    let scale = T::one() / T::of(c as f64).sqrt();
    let mut dp = vec![T::zero(); l * l];
    sink.with(qkv, |dqkv| {
        for i in 0..n {
            let item = v.item(i);
            let (q, rest) = item.split_at(c * l);
            let (k, val) = rest.split_at(c * l);
            let p = &probs[i * l * l..(i + 1) * l * l];
            let go = &grad[i * c * l..(i + 1) * c * l];
            let di = &mut dqkv[i * c3 * l..(i + 1) * c3 * l];
            let (dq, rest) = di.split_at_mut(c * l);
            let (dk, dv) = rest.split_at_mut(c * l);
            // dV = dO · P
            T::gemm(c, l, l, T::one(), go, (l, 1), p, (l, 1), T::one(), dv, (l, 1));
            // dP = dOᵀ · V
            T::gemm(l, c, l, T::one(), go, (1, l), val, (l, 1), T::zero(), &mut dp, (l, 1));
            // softmax backward in place: dS = P ⊙ (dP − Σ_j dP⊙P)
            for (drow, prow) in dp.chunks_mut(l).zip(p.chunks(l)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            // dQ = scale · K · dSᵀ ; dK = scale · Q · dS
            T::gemm(c, l, l, scale, k, (l, 1), &dp, (1, l), T::one(), dq, (l, 1));
            T::gemm(c, l, l, scale, q, (l, 1), &dp, (l, 1), T::one(), dk, (l, 1));
        }
    });
}
