use std::borrow::Cow;

use rayon::prelude::*;

use super::expect_rank;
use crate::{Backward, BackwardContext, Graph, Scalar, TensorError, Var};

/// Output extent of a convolution along one axis, or `None` when the padded
/// input is smaller than the kernel.
pub fn conv2d_output_extent(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (stride > 0 && k > 0 && padded >= k).then(|| (padded - k) / stride + 1)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    /// Input pixel feeding `(oy, ox)` through kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    /// Unfolds one sample into a `[C·k·k, OH·OW]` patch matrix.
    fn im2col<'a, T: Scalar>(&self, x: &'a [T]) -> Cow<'a, [T]> {
        if self.is_pointwise() {
            return Cow::Borrowed(x);
        }
        let (k, pixels) = (self.k, self.pixels());
        let mut cols = vec![T::zero(); self.patch() * pixels];
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * pixels..][..pixels];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                row[oy * self.ow + ox] = plane[y * self.w + xx];
                            }
                        }
                    }
                }
            }
        }
        Cow::Owned(cols)
    }

    fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        if self.is_pointwise() {
            return cols.to_vec();
        }
        let (k, pixels) = (self.k, self.pixels());
        let mut dx = vec![T::zero(); self.c * self.h * self.w];
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * pixels..][..pixels];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, xx)) = self.source(oy, ox, ky, kx) {
                                let d = &mut plane[y * self.w + xx];
                                *d = *d + row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    y.iter_mut().zip(x).for_each(|(yv, &xv)| *yv = *yv + alpha * xv);
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

struct Conv2d {
    geo: Geometry,
}

impl<T: Scalar> Backward<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let geo = self.geo;
        let (x, w, g) = (ctx.input(0), ctx.input(1), ctx.grad_output);
        let (patch, pixels) = (geo.patch(), geo.pixels());
        let in_len = geo.c * geo.h * geo.w;
        let out_len = geo.f * pixels;
        let (need_x, need_w, need_b) = (ctx.needs_grad(0), ctx.needs_grad(1), ctx.needs_grad(2));

        // Each sample is processed independently and reduced in batch order,
        // so results do not depend on the thread count.
        let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>)> = x
            .par_chunks_exact(in_len)
            .zip(g.par_chunks_exact(out_len))
            .map(|(xs, gs)| {
                let dx = need_x.then(|| {
                    let mut dcols = vec![T::zero(); patch * pixels];
                    for f in 0..geo.f {
                        let grow = &gs[f * pixels..(f + 1) * pixels];
                        for kk in 0..patch {
                            axpy(w[f * patch + kk], grow, &mut dcols[kk * pixels..(kk + 1) * pixels]);
                        }
                    }
                    geo.col2im(&dcols)
                });
                let dw = need_w.then(|| {
                    let cols = geo.im2col(xs);
                    let mut dw = vec![T::zero(); geo.f * patch];
                    for f in 0..geo.f {
                        let grow = &gs[f * pixels..(f + 1) * pixels];
                        for kk in 0..patch {
                            dw[f * patch + kk] = dot(grow, &cols[kk * pixels..(kk + 1) * pixels]);
                        }
                    }
                    dw
                });
                let db = need_b.then(|| {
                    gs.chunks_exact(pixels)
                        .map(|row| row.iter().copied().sum())
                        .collect()
                });
                (dx, dw, db)
            })
            .collect();

        let mut dx = need_x.then(|| Vec::with_capacity(x.len()));
        let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
        let mut db = need_b.then(|| vec![T::zero(); geo.f]);
        for (sx, sw, sb) in per_sample {
            if let (Some(acc), Some(s)) = (dx.as_mut(), sx) {
                acc.extend(s);
            }
            if let (Some(acc), Some(s)) = (dw.as_mut(), sw) {
                axpy(T::one(), &s, acc);
            }
            if let (Some(acc), Some(s)) = (db.as_mut(), sb) {
                axpy(T::one(), &s, acc);
            }
        }
        vec![dx, dw, db]
    }
}

impl<T: Scalar> Graph<T> {
    /// 2-D cross-correlation of `input[N,C,H,W]` with `weight[F,C,k,k]` plus
    /// `bias[F]`, producing `[N,F,H',W']`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        expect_rank("conv2d", &xs, 4)?;
        expect_rank("conv2d", &ws, 4)?;
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, wc, k) = (ws[0], ws[1], ws[2]);
        if wc != c || ws[3] != k {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![f, c, k, k],
                got: ws,
            });
        }
        if self.shape(bias) != [f] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: vec![f],
                got: self.shape(bias).to_vec(),
            });
        }
        let (Some(oh), Some(ow)) = (
            conv2d_output_extent(h, k, stride, padding),
            conv2d_output_extent(w, k, stride, padding),
        ) else {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel {k}, stride {stride}, padding {padding} invalid for {h}x{w}"),
            });
        };
        let geo = Geometry {
            c,
            h,
            w,
            f,
            k,
            stride,
            padding,
            oh,
            ow,
        };
        let (patch, pixels) = (geo.patch(), geo.pixels());
        let (xv, wv, bv) = (self.value(input), self.value(weight), self.value(bias));
        let out: Vec<T> = xv
            .par_chunks_exact(c * h * w)
            .flat_map_iter(|xs| {
                let cols = geo.im2col(xs);
                let mut out = vec![T::zero(); f * pixels];
                for (fi, orow) in out.chunks_exact_mut(pixels).enumerate() {
                    orow.fill(bv[fi]);
                    for kk in 0..patch {
                        axpy(wv[fi * patch + kk], &cols[kk * pixels..(kk + 1) * pixels], orow);
                    }
                }
                out
            })
            .collect();
        Ok(self.record(&[input, weight, bias], vec![n, f, oh, ow], out, Conv2d { geo }))
    }
}
