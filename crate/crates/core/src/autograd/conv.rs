//! 2-D convolution via im2col and GEMM, NCHW layout.

use super::{GradSink, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cols_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols_len(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1 stride-1 unpadded convolution needs no column buffer.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

impl Geometry {
    /// Output columns `[lo, hi)` whose input column `ox·s + kj − pad` is
    /// inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn input_row(&self, oy: usize, ki: usize) -> Option<usize> {
        (oy * self.stride + ki).checked_sub(self.pad).filter(|&iy| iy < self.h)
    }
}

fn im2col<T: Float>(x: &[T], g: Geometry, col: &mut [T]) {
    let l = g.cols_len();
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * l..(row + 1) * l];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.ho {
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.input_row(oy, ki) else {
                        out.fill(T::zero());
                        continue;
                    };
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let src = &x[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (o, s) in out[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], g: Geometry, dx: &mut [T]) {
    let l = g.cols_len();
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * l..(row + 1) * l];
                let (lo, hi) = g.valid_cols(kj);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oy in 0..g.ho {
                    let Some(iy) = g.input_row(oy, ki) else {
                        continue;
                    };
                    let dst = &mut dx[(c * g.h + iy) * g.w..(c * g.h + iy + 1) * g.w];
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(s) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    if x.shape().len() != 4 {
        return Err(Error::shape(&[0, 0, 0, 0], x.shape()));
    }
    let (_, cin, h, wd) = x.dims4();
    let (cout, wcin, k, k2) = w.dims4();
    if wcin != cin || k != k2 {
        return Err(Error::shape(&[cout, cin, k, k], w.shape()));
    }
    b.ensure_shape(&[cout])?;
    if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::config("conv2d", "kernel larger than padded input"));
    }
    Ok(Geometry {
        cin,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (wd + 2 * pad - k) / stride + 1,
    })
}

impl<T: Float> Tape<T> {
    /// Square-kernel convolution with bias; `w` is `(cout, cin, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let g = geometry(xv, wv, bv, stride, pad)?;
        let n = xv.dims4().0;
        let cout = wv.dims4().0;
        let kk = g.cols_rows();
        let l = g.cols_len();
        let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kk * l]
        };
        for i in 0..n {
            let xi = xv.item(i);
            let cols: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, g, &mut col);
                &col
            };
            let oi = out.item_mut(i);
            for (co, row) in oi.chunks_mut(l).enumerate() {
                row.fill(bv.data()[co]);
            }
            T::gemm(
                cout,
                kk,
                l,
                T::one(),
                wv.data(),
                (kk, 1),
                cols,
                (l, 1),
                T::one(),
                oi,
                (l, 1),
            );
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward<T: Float>(
    tape: &Tape<T>,
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    pad: usize,
    out: &Tensor<T>,
    grad: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (xv, wv, bv) = (tape.value(x), tape.value(w), tape.value(b));
    let g = geometry(xv, wv, bv, stride, pad).expect("validated in forward");
    let (n, cout, _, _) = out.dims4();
    let kk = g.cols_rows();
    let l = g.cols_len();
    let want_w = sink.wants(w);
    let want_x = sink.wants(x);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * l]
    };
    let mut dcol = vec![T::zero(); if want_x && !g.is_pointwise() { kk * l } else { 0 }];
    let item = cout * l;
    let in_item = xv.numel() / n;

    if sink.wants(b) {
        sink.with(b, |db| {
            for i in 0..n {
                let gi = &grad[i * item..(i + 1) * item];
                for (co, row) in gi.chunks(l).enumerate() {
                    db[co] += row.iter().copied().sum::<T>();
                }
            }
        });
    }
    if want_w {
        // dW += dY · colᵀ, summed over the batch in fixed order.
        let mut dw = vec![T::zero(); wv.numel()];
        for i in 0..n {
            let gi = &grad[i * item..(i + 1) * item];
            let cols: &[T] = if g.is_pointwise() {
                xv.item(i)
            } else {
                im2col(xv.item(i), g, &mut col);
                &col
            };
            T::gemm(cout, l, kk, T::one(), gi, (l, 1), cols, (1, l), T::one(), &mut dw, (kk, 1));
        }
        sink.add(w, &dw);
    }
    if want_x {
        sink.with(x, |dx| {
            for i in 0..n {
                let gi = &grad[i * item..(i + 1) * item];
                let dxi = &mut dx[i * in_item..(i + 1) * in_item];
                if g.is_pointwise() {
                    T::gemm(kk, cout, l, T::one(), wv.data(), (1, kk), gi, (l, 1), T::one(), dxi, (l, 1));
                } else {
                    T::gemm(
                        kk,
                        cout,
                        l,
                        T::one(),
                        wv.data(),
                        (1, kk),
                        gi,
                        (l, 1),
                        T::zero(),
                        &mut dcol,
                        (l, 1),
                    );
                    col2im(&dcol, g, dxi);
                }
            }
        });
    }
}
