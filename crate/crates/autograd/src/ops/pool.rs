use super::expect_rank;
use crate::{Backward, BackwardContext, Graph, Scalar, TensorError, Var};

struct GlobalAvgPool {
    plane: usize,
}

struct MaxPool2d {
    /// Flat input index of the winning element for every output element.
    argmax: Vec<usize>,
}

struct UpsampleNearest {
    factor: usize,
    nc: usize,
    h: usize,
    w: usize,
}

impl<T: Scalar> Backward<T> for GlobalAvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let inv = T::from_f64(1.0 / self.plane as f64);
        let dx = ctx
            .grad_output
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * inv, self.plane))
            .collect();
        vec![Some(dx)]
    }
}

impl<T: Scalar> Backward<T> for MaxPool2d {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); ctx.input(0).len()];
        for (&src, &g) in self.argmax.iter().zip(ctx.grad_output) {
            dx[src] = dx[src] + g;
        }
        vec![Some(dx)]
    }
}

impl<T: Scalar> Backward<T> for UpsampleNearest {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }
    fn backward(&self, ctx: &BackwardContext<'_, T>) -> Vec<Option<Vec<T>>> {
        let (f, h, w) = (self.factor, self.h, self.w);
        let (oh, ow) = (h * f, w * f);
        let g = ctx.grad_output;
        let mut dx = vec![T::zero(); self.nc * h * w];
        for p in 0..self.nc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let s = p * h * w + (oy / f) * w + ox / f;
                    dx[s] = dx[s] + g[p * oh * ow + oy * ow + ox];
                }
            }
        }
        vec![Some(dx)]
    }
}

impl<T: Scalar> Graph<T> {
    /// Spatial mean of every `H×W` plane: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        expect_rank("global_avg_pool", &shape, 4)?;
        let plane = shape[2] * shape[3];
        let inv = T::from_f64(1.0 / plane as f64);
        let out = self
            .value(x)
            .chunks_exact(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.record(&[x], vec![shape[0], shape[1]], out, GlobalAvgPool { plane }))
    }

    /// Max pooling without padding. Ties go to the first element in
    /// row-major window order.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        expect_rank("max_pool2d", &shape, 4)?;
        let (h, w) = (shape[2], shape[3]);
        if k == 0 || stride == 0 || k > h || k > w {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2d",
                reason: format!("kernel {k} / stride {stride} invalid for {h}x{w}"),
            });
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let nc = shape[0] * shape[1];
        let v = self.value(x);
        let mut out = Vec::with_capacity(nc * oh * ow);
        let mut argmax = Vec::with_capacity(nc * oh * ow);
        for p in 0..nc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = p * h * w + oy * stride * w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
                            if v[idx] > v[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.record(
            &[x],
            vec![shape[0], shape[1], oh, ow],
            out,
            MaxPool2d { argmax },
        ))
    }

    /// Replicates every cell `factor × factor` times.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        expect_rank("upsample_nearest", &shape, 4)?;
        if factor == 0 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_nearest",
                reason: "factor must be at least 1".into(),
            });
        }
        if factor == 1 {
            return Ok(x);
        }
        let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let (oh, ow) = (h * factor, w * factor);
        let v = self.value(x);
        let mut out = Vec::with_capacity(nc * oh * ow);
        for p in 0..nc {
            for oy in 0..oh {
                let row = &v[p * h * w + (oy / factor) * w..][..w];
                for ox in 0..ow {
                    out.push(row[ox / factor]);
                }
            }
        }
        Ok(self.record(
            &[x],
            vec![shape[0], shape[1], oh, ow],
            out,
            UpsampleNearest { factor, nc, h, w },
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Graph, ParamStore, Tensor};

    #[test]
    fn global_avg_pool_mean() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y), &[2.5]);
        assert_eq!(g.shape(y), &[1, 1]);
    }

    #[test]
    fn max_pool_basic_and_tie() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y), &[4.0]);
        assert!(g.max_pool2d(x, 3, 1).is_err());

        let mut p = ParamStore::new();
        let id = p.insert("x", Tensor::full(&[1, 1, 2, 2], 7.0)).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.param(&p, id);
        let y = g.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y), &[7.0]);
        let l = g.sum(y);
        g.backward(l, &mut p).unwrap();
        assert_eq!(p.get(id).grad().unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_replicates_and_sums_gradient() {
        let mut p = ParamStore::new();
        let id = p.insert("x", Tensor::full(&[1, 1, 1, 1], 2.5)).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.param(&p, id);
        assert_eq!(g.upsample_nearest(x, 1).unwrap(), x);
        let y = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(g.value(y), &[2.5; 4]);
        let l = g.sum(y);
        g.backward(l, &mut p).unwrap();
        assert_eq!(p.get(id).grad().unwrap(), &[4.0]);
    }
}
