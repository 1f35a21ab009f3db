mod common;

use common::{max_grad_error, random_tensor, rng};
use mhmtl_core::autograd::{Graph, Tensor};
use mhmtl_core::losses::{self, ce_loss, detection_loss, dice_loss, keypoint_mse, LossConfig, Targets};
use mhmtl_core::model::encode_detection_target;
use mhmtl_core::TaskSpec;
use rand::Rng;

const INSTANCES: u64 = 20;

#[test]
fn dice_gradient_through_softmax() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (n, k) = (r.random_range(1..3), r.random_range(2..4));
        let logits = random_tensor(&mut r, &[n, k, 3, 4], -2.0, 2.0);
        let target: Vec<u8> = (0..n * 12).map(|_| r.random_range(0..k) as u8).collect();
        let task = TaskSpec::segmentation("s", k);
        let err = max_grad_error(&[logits], |g, v| {
            losses::composite(g, &task, v[0], &Targets::Masks(target.clone()), &LossConfig::default()).unwrap()
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn ce_gradient() {
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let (n, k) = (r.random_range(1..5), r.random_range(2..6));
        let logits = random_tensor(&mut r, &[n, k], -3.0, 3.0);
        let target: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let err = max_grad_error(&[logits], |g, v| ce_loss(g, v[0], &target).unwrap());
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn keypoint_gradient() {
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let (n, m) = (r.random_range(1..4), r.random_range(1..4));
        let pred = random_tensor(&mut r, &[n, 2 * m], 0.0, 1.0);
        let target: Vec<f64> = (0..n * 2 * m).map(|_| r.random()).collect();
        let err = max_grad_error(&[pred], |g, v| keypoint_mse(g, v[0], &target).unwrap());
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn detection_gradient() {
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let n = r.random_range(1..3);
        let pred = random_tensor(&mut r, &[n, 5, 4, 4], 0.05, 0.95);
        let boxes: Vec<[f64; 4]> = (0..n).map(|_| std::array::from_fn(|_| r.random_range(0.05..0.95))).collect();
        let err = max_grad_error(&[pred], |g, v| detection_loss(g, v[0], &boxes, 8.0).unwrap());
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn ce_matches_direct_summation() {
    let mut r = rng(7);
    for _ in 0..20 {
        let (n, k) = (r.random_range(1..6), r.random_range(2..6));
        let z: Vec<f64> = (0..n * k).map(|_| r.random_range(-4.0..4.0)).collect();
        let t: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let mut want = 0.0;
        for s in 0..n {
            let denom: f64 = (0..k).map(|c| z[s * k + c].exp()).sum();
            want -= (z[s * k + t[s]].exp() / denom).ln();
        }
        want /= n as f64;
        let mut g = Graph::new();
        let v = g.input(&Tensor::new(&[n, k], z).unwrap());
        let l = ce_loss(&mut g, v, &t).unwrap();
        assert!((g.value(l)[0] - want).abs() < 1e-12);
    }
}

#[test]
fn keypoint_mse_matches_hand_sum() {
    let pred = [0.1, 0.2, 0.7, 0.4];
    let target = [0.3, 0.1, 0.5, 0.9];
    let want = ((0.2f64.powi(2) + 0.1f64.powi(2)) + (0.2f64.powi(2) + 0.5f64.powi(2))) / 2.0;
    let mut g = Graph::new();
    let v = g.input(&Tensor::new(&[1, 4], pred.to_vec()).unwrap());
    let l = keypoint_mse(&mut g, v, &target).unwrap();
    assert!((g.value(l)[0] - want).abs() < 1e-15);
    let zero = keypoint_mse(&mut g, v, &pred).unwrap();
    assert_eq!(g.value(zero)[0], 0.0);
}

#[test]
fn detection_loss_ignores_non_target_cells() {
    let mut r = rng(11);
    for _ in 0..20 {
        let (h, w) = (8, 8);
        let b: [f64; 4] = std::array::from_fn(|_| r.random_range(0.05..0.95));
        let (i, j) = encode_detection_target(b[0], b[1], h, w);
        let base = random_tensor(&mut r, &[1, 5, h, w], 0.0, 1.0);
        let mut perturbed = base.clone();
        for (idx, v) in perturbed.data_mut().iter_mut().enumerate() {
            if idx % (h * w) != i * w + j {
                *v = r.random_range(-50.0..50.0);
            }
        }
        let value = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.input(t);
            let l = detection_loss(&mut g, v, &[b], 8.0).unwrap();
            g.value(l)[0]
        };
        assert_eq!(value(&base), value(&perturbed));
    }
}

#[test]
fn dice_symmetric_under_foreground_relabeling() {
    let mut r = rng(12);
    let k = 3;
    let probs = random_tensor(&mut r, &[2, k, 4, 4], 0.0, 1.0);
    let target: Vec<u8> = (0..32).map(|_| r.random_range(0..k) as u8).collect();
    // Swap classes 1 and 2 in both prediction and target.
    let swapped_probs = Tensor::from_fn(&[2, k, 4, 4], |i| {
        let (n, c, p) = (i / (k * 16), (i / 16) % k, i % 16);
        let src = match c {
            1 => 2,
            2 => 1,
            c => c,
        };
        probs.data()[(n * k + src) * 16 + p]
    });
    let swapped_target: Vec<u8> = target.iter().map(|&t| [0, 2, 1][t as usize]).collect();
    let value = |p: &Tensor<f64>, t: &[u8]| {
        let mut g = Graph::new();
        let v = g.input(p);
        let l = dice_loss(&mut g, v, t, 1e-6).unwrap();
        g.value(l)[0]
    };
    assert!((value(&probs, &target) - value(&swapped_probs, &swapped_target)).abs() < 1e-12);
}

#[test]
fn composite_dispatches_by_kind() {
    let mut g = Graph::<f64>::new();
    let z = g.input(&Tensor::zeros(&[2, 4]));
    let task = TaskSpec::classification("c", 4);
    let l = losses::composite(&mut g, &task, z, &Targets::Classes(vec![0, 3]), &LossConfig::default()).unwrap();
    assert!((g.value(l)[0] - 4f64.ln()).abs() < 1e-12);
}
