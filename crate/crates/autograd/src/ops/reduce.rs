use crate::{Backward, BackwardContext, Graph, Scalar, TensorError, Var};

struct Sum;
struct Mean;
struct Softmax {
    outer: usize,
    axis_len: usize,
    inner: usize,
}

impl<T: Scalar> Backward<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![ctx.grad_output[0]; ctx.input(0).len()])]
    }
}

impl<T: Scalar> Backward<T> for Mean {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let n = ctx.input(0).len();
        vec![Some(vec![ctx.grad_output[0] / T::from_f64(n as f64); n])]
    }
}

impl<T: Scalar> Backward<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let (g, y) = (ctx.grad_output, ctx.output);
        let mut dx = vec![T::zero(); y.len()];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let at = |k: usize| (o * self.axis_len + k) * self.inner + i;
                let dot = (0..self.axis_len).fold(T::zero(), |acc, k| acc + g[at(k)] * y[at(k)]);
                for k in 0..self.axis_len {
                    dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Scalar> Graph<T> {
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.record(&[a], vec![1], vec![s], Sum)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        self.record(&[a], vec![1], vec![s], Mean)
    }

    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                reason: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * axis_len + k) * inner + i;
                let m = (0..axis_len).fold(T::neg_infinity(), |m, k| m.max(x[at(k)]));
                let mut z = T::zero();
                for k in 0..axis_len {
                    let e = (x[at(k)] - m).exp();
                    out[at(k)] = e;
                    z = z + e;
                }
                for k in 0..axis_len {
                    out[at(k)] = out[at(k)] / z;
                }
            }
        }
        Ok(self.record(
            &[a],
            shape,
            out,
            Softmax {
                outer,
                axis_len,
                inner,
            },
        ))
    }
}
