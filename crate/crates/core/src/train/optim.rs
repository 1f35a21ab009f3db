use mhmtl_autograd::{ParamId, ParamStore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "AdamWConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamWConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamWConfig::default_eps")]
    pub eps: f64,
    #[serde(default = "AdamWConfig::default_weight_decay")]
    pub weight_decay: f64,
}

impl AdamWConfig {
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_eps() -> f64 {
        1e-8
    }
    fn default_weight_decay() -> f64 {
        0.01
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: Self::default_beta1(),
            beta2: Self::default_beta2(),
            eps: Self::default_eps(),
            weight_decay: Self::default_weight_decay(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{0}`")]
    NonFinite(String),
    #[error("optimizer state does not match the parameter store: {0}")]
    State(String),
}

/// Moment estimates and per-parameter step counts. A parameter's count only
/// advances on steps where it received a gradient, so bias correction stays
/// exact for heads that are visited intermittently.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub steps: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            state: AdamWState {
                m: zeros.clone(),
                v: zeros,
                steps: vec![0; params.len()],
            },
        }
    }

    pub fn state(&self) -> &AdamWState {
        &self.state
    }

    pub fn set_state(&mut self, state: AdamWState, params: &ParamStore<f32>) -> Result<(), OptimError> {
        let ok = state.m.len() == params.len()
            && state.v.len() == params.len()
            && state.steps.len() == params.len()
            && params
                .iter()
                .all(|(id, _, t)| state.m[id.0].len() == t.numel() && state.v[id.0].len() == t.numel());
        if !ok {
            return Err(OptimError::State("moment shapes differ from parameters".into()));
        }
        self.state = state;
        Ok(())
    }

    /// One update of every parameter holding a gradient; parameters without
    /// one are left untouched, weight decay included. `lr` gives the
    /// learning rate of each parameter's group. Returns the number of
    /// parameters updated. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut ParamStore<f32>, lr: impl Fn(ParamId) -> f64) -> Result<usize, OptimError> {
        for (_, name, t) in params.iter() {
            if t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(OptimError::NonFinite(name.to_string()));
            }
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let ids: Vec<ParamId> = params.ids().collect();
        let mut updated = 0;
        for id in ids {
            let tensor = params.get_mut(id);
            let Some(grad) = tensor.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let i = id.0;
            self.state.steps[i] += 1;
            let t = self.state.steps[i] as i32;
            let lr = lr(id);
            let shrink = (1.0 - lr * weight_decay) as f32;
            let c1 = (1.0 - beta1.powi(t)) as f32;
            let c2 = (1.0 - beta2.powi(t)) as f32;
            let (b1, b2, eps, lr) = (beta1 as f32, beta2 as f32, eps as f32, lr as f32);
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for (((p, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *p *= shrink;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            updated += 1;
        }
        Ok(updated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mhmtl_autograd::Tensor;

    fn store(values: &[f32], grad: Option<&[f32]>) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        let id = p.insert("w", Tensor::new(&[values.len()], values.to_vec()).unwrap()).unwrap();
        if let Some(g) = grad {
            p.get_mut(id).accumulate_grad(g).unwrap();
        }
        p
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = store(&[0.5, -1.0], Some(&[0.0, 0.0]));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, |_| 1e-3).unwrap();
        assert_eq!(p.by_name("w").unwrap().data(), &[0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        for g in [3.0f32, -0.2] {
            let mut p = store(&[1.0], Some(&[g]));
            let mut opt = AdamW::new(cfg, &p);
            opt.step(&mut p, |_| 1e-2).unwrap();
            let moved = p.by_name("w").unwrap().data()[0] - 1.0;
            assert!((moved + 1e-2 * g.signum()).abs() < 1e-6, "{moved}");
        }
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = store(&[2.0], Some(&[0.0]));
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, |_| 0.1).unwrap();
        assert!((p.by_name("w").unwrap().data()[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-7);
    }

    #[test]
    fn parameters_without_gradient_are_skipped() {
        let mut p = store(&[2.0], None);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert_eq!(opt.step(&mut p, |_| 0.1).unwrap(), 0);
        assert_eq!(p.by_name("w").unwrap().data(), &[2.0]);
        assert_eq!(opt.state().steps, vec![0]);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = store(&[1.0, 1.0], Some(&[0.1, f32::NAN]));
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert_eq!(opt.step(&mut p, |_| 0.1), Err(OptimError::NonFinite("w".into())));
        assert_eq!(p.by_name("w").unwrap().data(), &[1.0, 1.0]);
    }
}
