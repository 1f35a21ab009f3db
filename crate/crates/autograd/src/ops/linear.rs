use super::expect_rank;
use crate::{Backward, BackwardContext, Graph, Scalar, TensorError, Var};

/// `y[N,O] = x[N,I] · wᵀ + b`, with `w` stored as `[O, I]`.
struct Affine {
    n: usize,
    inp: usize,
    out: usize,
}

impl<T: Scalar> Backward<T> for Affine {
    fn name(&self) -> &'static str {
        "affine"
    }

    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let (n, ni, no) = (self.n, self.inp, self.out);
        let (g, x, w) = (ctx.grad_output, ctx.input(0), ctx.input(1));
        let dx = ctx.needs_grad(0).then(|| {
            let mut dx = vec![T::zero(); n * ni];
            for s in 0..n {
                for o in 0..no {
                    let go = g[s * no + o];
                    let row = &w[o * ni..(o + 1) * ni];
                    for (d, &wv) in dx[s * ni..(s + 1) * ni].iter_mut().zip(row) {
                        *d = *d + go * wv;
                    }
                }
            }
            dx
        });
        let dw = ctx.needs_grad(1).then(|| {
            let mut dw = vec![T::zero(); no * ni];
            for s in 0..n {
                let xs = &x[s * ni..(s + 1) * ni];
                for o in 0..no {
                    let go = g[s * no + o];
                    for (d, &xv) in dw[o * ni..(o + 1) * ni].iter_mut().zip(xs) {
                        *d = *d + go * xv;
                    }
                }
            }
            dw
        });
        let db = ctx.needs_grad(2).then(|| {
            let mut db = vec![T::zero(); no];
            for s in 0..n {
                for o in 0..no {
                    db[o] = db[o] + g[s * no + o];
                }
            }
            db
        });
        vec![dx, dw, db]
    }
}

impl<T: Scalar> Graph<T> {
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        expect_rank("affine", self.shape(x), 2)?;
        expect_rank("affine", self.shape(w), 2)?;
        let (n, ni) = (self.shape(x)[0], self.shape(x)[1]);
        let (no, wi) = (self.shape(w)[0], self.shape(w)[1]);
        if wi != ni {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                expected: vec![no, ni],
                got: self.shape(w).to_vec(),
            });
        }
        if self.shape(b) != [no] {
            return Err(TensorError::ShapeMismatch {
                op: "affine",
                expected: vec![no],
                got: self.shape(b).to_vec(),
            });
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let mut out = Vec::with_capacity(n * no);
        for s in 0..n {
            let xs = &xv[s * ni..(s + 1) * ni];
            for o in 0..no {
                let row = &wv[o * ni..(o + 1) * ni];
                let dot = xs.iter().zip(row).fold(T::zero(), |acc, (&a, &c)| acc + a * c);
                out.push(dot + bv[o]);
            }
        }
        Ok(self.record(&[x, w, b], vec![n, no], out, Affine { n, inp: ni, out: no }))
    }
}
