//! Central finite-difference oracle. Uses forward values only, never the
//! backward rules under test.

use mhmtl_autograd::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
// An undetected kink shifts the central difference by at most half this gap.
const KINK_SLOPE_GAP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Builds a scalar from `inputs` by projecting `f`'s output onto fixed random
/// weights, then compares analytic against numeric gradients for every input
/// element. Returns the worst relative error.
pub fn check<F>(seed: u64, inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut probe = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.input(t)).collect();
    let out = f(&mut probe, &vars);
    let mut r = rng(seed ^ 0x9e37_79b9);
    let weights = random_tensor(&mut r, probe.shape(out), -1.0, 1.0);

    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t)).collect();
        let out = f(&mut g, &vars);
        g.value(out)
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.insert(&format!("in{i}"), t.clone()).unwrap())
        .collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
    let out = f(&mut g, &vars);
    let w = g.constant(&weights);
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss, &mut store).unwrap();

    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let analytic = store
            .get(*id)
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let (fp, fm) = (eval(&plus), eval(&minus));
            let numeric = (fp - fm) / (2.0 * H);
            // One-sided slopes disagree only when a ReLU/max kink lies inside
            // the stencil; the derivative is undefined there.
            let f0 = eval(inputs);
            let (right, left) = ((fp - f0) / H, (f0 - fm) / H);
            if rel_err(right, left) > KINK_SLOPE_GAP {
                continue;
            }
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
