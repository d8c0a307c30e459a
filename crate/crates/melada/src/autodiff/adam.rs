//! Adam optimizer with bias correction and coupled L2 weight decay.
//!
//! Weight decay is added to the gradient before the moment updates
//! (classic Adam-with-L2, not AdamW), so runs are reproducible against
//! that convention.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::new(2e-4, 1e-4)
    }
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn for_param(param: &Tensor) -> Self {
        AdamState {
            m: Tensor::zeros(param.rows(), param.cols()),
            v: Tensor::zeros(param.rows(), param.cols()),
            t: 0,
        }
    }
}

/// One Adam update, in place.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::invalid(format!(
            "adam shapes inconsistent: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let p = param.data_mut();
    let g = grad.data();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..p.len() {
        let gi = g[i] + cfg.weight_decay * p[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimizer state for a list of parameter tensors updated together.
#[derive(Clone, Debug)]
pub struct GroupAdam {
    pub states: Vec<AdamState>,
    pub cfg: AdamConfig,
}

impl GroupAdam {
    pub fn new(params: &[&Tensor], cfg: AdamConfig) -> Self {
        GroupAdam {
            states: params.iter().map(|p| AdamState::for_param(p)).collect(),
            cfg,
        }
    }

    /// Updates each parameter with its gradient; `None` grads are skipped
    /// (parameter untouched, state untouched).
    pub fn step(
        &mut self,
        params: Vec<&mut Tensor>,
        grads: &[Option<Tensor>],
    ) -> Result<()> {
        debug_assert_eq!(params.len(), self.states.len());
        debug_assert_eq!(grads.len(), self.states.len());
        for (i, p) in params.into_iter().enumerate() {
            if let Some(g) = &grads[i] {
                adam_step(p, g, &mut self.states[i], &self.cfg)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_hand_value() {
        // p = 0, g = 1, lr = 2e-4, fresh state, wd = 0:
        // m_hat = 1, v_hat = 1, delta = -lr / (1 + eps).
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::for_param(&p);
        let cfg = AdamConfig::new(2e-4, 0.0);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        let expected = -2e-4 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-18, "{} vs {}", p.item(), expected);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_keeps_param() {
        let mut p = Tensor::scalar(5.0);
        let g = Tensor::scalar(0.0);
        let mut st = AdamState::for_param(&p);
        let cfg = AdamConfig::new(2e-4, 0.0);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert_eq!(p.item(), 5.0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = Tensor::row(vec![0.1, -0.2, 0.3]);
            let g = Tensor::row(vec![0.5, 0.25, -1.0]);
            let mut st = AdamState::for_param(&p);
            let cfg = AdamConfig::new(1e-3, 1e-4);
            for _ in 0..10 {
                adam_step(&mut p, &g, &mut st, &cfg).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::for_param(&p);
        let cfg = AdamConfig::new(0.0, 0.0);
        assert!(adam_step(&mut p, &g, &mut st, &cfg).is_err());
    }
}
