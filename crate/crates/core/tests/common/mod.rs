#![allow(dead_code)]

use mhmtl_core::autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn eval(inputs: &[Tensor<f64>], f: &impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(&t.clone().with_requires_grad(true))).collect();
    let out = f(&mut g, &vars);
    g.value(out)[0]
}

/// Largest relative error between the analytic gradient of the scalar `f`
/// and central differences, over every element of every input.
pub fn max_grad_error(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(&t.clone().with_requires_grad(true))).collect();
    let out = f(&mut g, &vars);
    let grads = g.gradients(out).expect("scalar output");
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in 0..t.numel() {
            let shifted = |d: f64| {
                let mut moved = inputs.to_vec();
                moved[k].data_mut()[i] += d;
                eval(&moved, &f)
            };
            let numeric = (shifted(H) - shifted(-H)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}
