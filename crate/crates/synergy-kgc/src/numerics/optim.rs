//! AdamW with decoupled weight decay.
//!
//! Decay is applied multiplicatively to the parameter value before the
//! moment update, so it never enters the moment estimates. Frozen
//! parameters receive neither decay nor updates but keep moment slots so
//! that state indices stay aligned with the [`ParamSet`].

use serde::{Deserialize, Serialize};

use crate::error::{KgcError, Result};
use crate::numerics::param::ParamSet;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
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
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamConfig,
    step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            cfg,
            step_count: 0,
            m,
            v,
        }
    }

    /// Rebuilds an optimizer from checkpointed state.
    pub fn from_state(cfg: AdamConfig, step_count: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        AdamW {
            cfg,
            step_count,
            m,
            v,
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Applies one update from the gradients accumulated in `params` and
    /// clears all gradients.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        assert_eq!(self.m.len(), params.len(), "optimizer/param set mismatch");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for idx in 0..params.len() {
            let id = crate::numerics::param::ParamId(idx);
            let p = params.get_mut(id);
            if !p.trainable {
                continue;
            }
            let decay = 1.0 - self.cfg.lr * self.cfg.weight_decay;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for ((theta, g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *theta *= decay;
                *mi = self.cfg.beta1 * *mi + (1.0 - self.cfg.beta1) * g;
                *vi = self.cfg.beta2 * *vi + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            if !p.value.all_finite() {
                return Err(KgcError::Numeric(format!(
                    "non-finite value for parameter `{}` after optimizer step {}",
                    p.name, self.step_count
                )));
            }
        }
        params.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_setup(lr: f64, wd: f64) -> (ParamSet, AdamW) {
        let mut ps = ParamSet::new();
        ps.add("theta", Tensor::scalar(1.0), true);
        let cfg = AdamConfig {
            lr,
            weight_decay: wd,
            ..AdamConfig::default()
        };
        let adam = AdamW::new(&ps, cfg);
        (ps, adam)
    }

    #[test]
    fn matches_reference_sequence_on_quadratic() {
        // Minimize f(theta) = theta^2 from theta = 1 with lr 0.1 and no
        // decay; the expected iterates are computed step by step from the
        // update equations directly.
        let (mut ps, mut adam) = quadratic_setup(0.1, 0.0);
        let id = ps.lookup("theta").unwrap();

        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=3 {
            let g = 2.0 * theta;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);

            let g_actual = 2.0 * ps.get(id).value.scalar_value();
            ps.accumulate_grad(id, &Tensor::scalar(g_actual)).unwrap();
            adam.step(&mut ps).unwrap();
            let got = ps.get(id).value.scalar_value();
            assert!(
                (got - theta).abs() < 1e-12,
                "step {t}: got {got}, expected {theta}"
            );
        }
    }

    #[test]
    fn first_step_is_signed_lr() {
        let (mut ps, mut adam) = quadratic_setup(0.01, 0.0);
        let id = ps.lookup("theta").unwrap();
        ps.accumulate_grad(id, &Tensor::scalar(1234.5)).unwrap();
        adam.step(&mut ps).unwrap();
        let got = ps.get(id).value.scalar_value();
        assert!((got - (1.0 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn decay_applies_before_update_and_without_gradient() {
        let (mut ps, mut adam) = quadratic_setup(0.1, 0.5);
        let id = ps.lookup("theta").unwrap();
        // Zero gradient: moments stay zero, update term is exactly zero,
        // only the multiplicative decay acts.
        adam.step(&mut ps).unwrap();
        let got = ps.get(id).value.scalar_value();
        assert_eq!(got, 1.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn frozen_params_do_not_move_but_grads_clear() {
        let mut ps = ParamSet::new();
        let id = ps.add("frozen", Tensor::vector(vec![1.0, 2.0]), false);
        let mut adam = AdamW::new(&ps, AdamConfig::default());
        ps.accumulate_grad(id, &Tensor::vector(vec![5.0, 5.0])).unwrap();
        adam.step(&mut ps).unwrap();
        assert_eq!(ps.get(id).value.data(), &[1.0, 2.0]);
        assert_eq!(ps.get(id).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn grads_are_zeroed_after_step() {
        let (mut ps, mut adam) = quadratic_setup(0.1, 0.0);
        let id = ps.lookup("theta").unwrap();
        ps.accumulate_grad(id, &Tensor::scalar(3.0)).unwrap();
        adam.step(&mut ps).unwrap();
        assert_eq!(ps.get(id).grad.data(), &[0.0]);
    }
}
