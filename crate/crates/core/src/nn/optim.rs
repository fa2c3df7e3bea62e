//! Bias-corrected adaptive-moment (Adam) updates.

use crate::error::{Error, Result};
use crate::nn::params::ParamSet;
use crate::nn::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, index-aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![F::zero(); p.data.len()]).collect(),
            v: params.iter().map(|p| vec![F::zero(); p.data.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step. `lr` overrides the config learning rate so callers can
/// schedule it; pass `cfg.lr` for a constant rate. Non-trainable parameters
/// are skipped. Gradients must be index-aligned with the parameter set.
pub fn adam_step<F: Scalar>(
    params: &mut ParamSet<F>,
    grads: &[Vec<F>],
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient count {} != parameter count {}",
            grads.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = F::from_double(cfg.beta1);
    let b2 = F::from_double(cfg.beta2);
    let one = F::one();
    let bc1 = F::from_double(1.0 - cfg.beta1.powi(t));
    let bc2 = F::from_double(1.0 - cfg.beta2.powi(t));
    let eps = F::from_double(cfg.eps);
    let lr = F::from_double(lr);

    for idx in 0..params.len() {
        let param = params.get_mut(idx);
        if !param.trainable {
            continue;
        }
        let g = &grads[idx];
        if g.len() != param.data.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient shape mismatch for {}",
                param.name
            )));
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param.data[i] = param.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("w", vec![2], vec![value, value], true);
        p
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = v_hat = g on step 1, so delta = -lr / (1 + eps).
        let mut params = one_param(0.5);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        adam_step(&mut params, &[vec![1.0, 1.0]], &mut state, &cfg, cfg.lr).unwrap();
        let delta = params.get(0).data[0] - 0.5;
        assert!((delta - (-9.99999990e-4)).abs() < 1e-12, "delta {delta}");
    }

    #[test]
    fn zero_gradient_no_change() {
        let mut params = one_param(0.25);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        adam_step(&mut params, &[vec![0.0, 0.0]], &mut state, &cfg, cfg.lr).unwrap();
        assert_eq!(params.get(0).data, vec![0.25, 0.25]);
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let mut params = one_param(0.1);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        adam_step(&mut params, &[vec![0.3, 0.3]], &mut state, &cfg, cfg.lr).unwrap();
        let d = &params.get(0).data;
        assert_eq!(d[0], d[1]);
    }

    #[test]
    fn frozen_param_untouched() {
        let mut params = ParamSet::new();
        params.push("frozen", vec![1], vec![1.0f64], false);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        adam_step(&mut params, &[vec![5.0]], &mut state, &cfg, cfg.lr).unwrap();
        assert_eq!(params.get(0).data[0], 1.0);
    }

    #[test]
    fn grad_count_mismatch_rejected() {
        let mut params = one_param(0.0);
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::default();
        assert!(adam_step(&mut params, &[], &mut state, &cfg, cfg.lr).is_err());
    }
}
