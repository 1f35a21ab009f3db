use rand::Rng;

use super::{expect_rank, expect_same};
use crate::{Backward, BackwardContext, Graph, Scalar, TensorError, Var, LOG_EPS};

struct Add;
struct Sub;
struct Mul;
struct Scale<T>(T);
struct Relu;
struct Sigmoid;
struct SigmoidChannels {
    channels: usize,
    plane: usize,
    total_channels: usize,
}
struct Log;
struct Dropout<T> {
    mask: Vec<T>,
}

fn map<T: Scalar>(g: &[T], f: impl Fn(usize, T) -> T) -> Vec<T> {
    g.iter().enumerate().map(|(i, &v)| f(i, v)).collect()
}

impl<T: Scalar> Backward<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad_output;
        vec![
            ctx.needs_grad(0).then(|| g.to_vec()),
            ctx.needs_grad(1).then(|| g.to_vec()),
        ]
    }
}

impl<T: Scalar> Backward<T> for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad_output;
        vec![
            ctx.needs_grad(0).then(|| g.to_vec()),
            ctx.needs_grad(1).then(|| map(g, |_, v| -v)),
        ]
    }
}

impl<T: Scalar> Backward<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let (g, a, b) = (ctx.grad_output, ctx.input(0), ctx.input(1));
        vec![
            ctx.needs_grad(0).then(|| map(g, |i, v| v * b[i])),
            ctx.needs_grad(1).then(|| map(g, |i, v| v * a[i])),
        ]
    }
}

impl<T: Scalar> Backward<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(map(ctx.grad_output, |_, v| v * self.0))]
    }
}

impl<T: Scalar> Backward<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = ctx.input(0);
        vec![Some(map(ctx.grad_output, |i, v| {
            if x[i] > T::zero() {
                v
            } else {
                T::zero()
            }
        }))]
    }
}

impl<T: Scalar> Backward<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let y = ctx.output;
        vec![Some(map(ctx.grad_output, |i, v| v * y[i] * (T::one() - y[i])))]
    }
}

impl<T: Scalar> Backward<T> for SigmoidChannels {
    fn name(&self) -> &'static str {
        "sigmoid_channels"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let y = ctx.output;
        vec![Some(map(ctx.grad_output, |i, v| {
            if (i / self.plane) % self.total_channels < self.channels {
                v * y[i] * (T::one() - y[i])
            } else {
                v
            }
        }))]
    }
}

impl<T: Scalar> Backward<T> for Log {
    fn name(&self) -> &'static str {
        "log"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = ctx.input(0);
        let eps = T::from_f64(LOG_EPS);
        vec![Some(map(ctx.grad_output, |i, v| {
            if x[i] > eps {
                v / x[i]
            } else {
                T::zero()
            }
        }))]
    }
}

impl<T: Scalar> Backward<T> for Dropout<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(map(ctx.grad_output, |i, v| v * self.mask[i]))]
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>), TensorError> {
        expect_same(op_name, self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> (Vec<usize>, Vec<T>) {
        (
            self.shape(a).to_vec(),
            self.value(a).iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.record(&[a, b], shape, out, Add))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.record(&[a, b], shape, out, Sub))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.record(&[a, b], shape, out, Mul))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let (shape, out) = self.unary(a, |x| x * c);
        self.record(&[a], shape, out, Scale(c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (shape, out) = self.unary(a, |x| x.max(T::zero()));
        self.record(&[a], shape, out, Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (shape, out) = self.unary(a, sigmoid);
        self.record(&[a], shape, out, Sigmoid)
    }

    /// Sigmoid on the first `channels` entries of axis 1 of an `N,C,H,W`
    /// tensor; remaining channels pass through unchanged.
    pub fn sigmoid_channels(&mut self, a: Var, channels: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        expect_rank("sigmoid_channels", &shape, 4)?;
        if channels > shape[1] {
            return Err(TensorError::InvalidArgument {
                op: "sigmoid_channels",
                reason: format!("{channels} channels requested of {}", shape[1]),
            });
        }
        let plane = shape[2] * shape[3];
        let total_channels = shape[1];
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                if (i / plane) % total_channels < channels {
                    sigmoid(x)
                } else {
                    x
                }
            })
            .collect();
        Ok(self.record(
            &[a],
            shape,
            out,
            SigmoidChannels {
                channels,
                plane,
                total_channels,
            },
        ))
    }

    /// Natural log with inputs clamped below at [`LOG_EPS`](crate::LOG_EPS).
    pub fn log(&mut self, a: Var) -> Var {
        let eps = T::from_f64(LOG_EPS);
        let (shape, out) = self.unary(a, |x| x.max(eps).ln());
        self.record(&[a], shape, out, Log)
    }

    /// Inverted dropout: at train time each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`. Returns
    /// `a` unchanged at eval time or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                reason: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.record(&[a], shape, out, Dropout { mask }))
    }
}
