use serde::{Deserialize, Serialize};

use super::{ModelParams, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam moments for one [`ModelParams`] collection, with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        AdamState {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.second[i]
    }

    /// Applies one update. `grads[i]` pairs with the i-th parameter; `None`
    /// means the parameter did not influence the loss (zero gradient).
    ///
    /// Returns `Ok(false)` and leaves everything untouched when any gradient
    /// is non-finite.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>]) -> Result<bool> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::invalid(format!(
                        "gradient shape {:?} for `{name}` of shape {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
                if !g.all_finite() {
                    log::warn!("non-finite gradient for `{name}`; skipping optimizer step");
                    return Ok(false);
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
                pd[j] -= c.lr * c.weight_decay * pd[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                pd[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn first_step_is_sign_update() {
        let mut p = one_param(1.0);
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut s = AdamState::new(&p, cfg);
        assert!(s.step(&mut p, &[Some(Tensor::scalar(0.5))]).unwrap());
        let delta = p.get("x").unwrap().item() - 1.0;
        assert!((delta + 1e-3).abs() < 1e-6, "{delta}");
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = one_param(2.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        s.step(&mut p, &[Some(Tensor::scalar(0.0))]).unwrap();
        let expected = 2.0 - 1e-3 * 1e-5 * 2.0;
        assert_eq!(p.get("x").unwrap().item(), expected);
    }

    #[test]
    fn two_steps_match_hand_recursion() {
        let cfg = AdamConfig::default();
        let mut p = one_param(0.7);
        let mut s = AdamState::new(&p, cfg);
        let g = 0.3;
        // Scripted recursion oracle.
        let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            theta -= cfg.lr * cfg.weight_decay * theta;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= cfg.lr * mh / (vh.sqrt() + 1e-8);
            s.step(&mut p, &[Some(Tensor::scalar(g))]).unwrap();
        }
        assert!((p.get("x").unwrap().item() - theta).abs() < 1e-12);
        assert!((s.first_moment(0).item() - m).abs() < 1e-12);
        assert!((s.second_moment(0).item() - v).abs() < 1e-12);
        assert_eq!(s.step_count(), 2);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut p = one_param(1.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        assert!(!s.step(&mut p, &[Some(Tensor::scalar(f64::NAN))]).unwrap());
        assert_eq!(p.get("x").unwrap().item(), 1.0);
        assert_eq!(s.step_count(), 0);
    }
}
