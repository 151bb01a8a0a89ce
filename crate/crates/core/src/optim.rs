//! Named parameter sets and the Adam optimizer.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Ordered parameters with their Adam moments and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub params: Vec<Param>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl ModelParams {
    pub fn new(params: Vec<Param>) -> Self {
        let zeros = |p: &Param| Tensor::zeros(p.value.shape());
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            params,
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Checks that moments match the parameters.
    pub fn validate(&self) -> Result<()> {
        if self.m.len() != self.params.len() || self.v.len() != self.params.len() {
            return Err(dim_err("model_params", String::from("moment count differs from parameter count")));
        }
        for ((p, m), v) in self.params.iter().zip(&self.m).zip(&self.v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(dim_err("model_params", format!("moments of {} have the wrong shape", p.name)));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. Any non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step(state: &mut ModelParams, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
    state.validate()?;
    if grads.len() != state.params.len() {
        return Err(dim_err(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), state.params.len()),
        ));
    }
    for (i, (g, p)) in grads.iter().zip(&state.params).enumerate() {
        if g.shape() != p.value.shape() {
            return Err(dim_err(
                "adam_step",
                format!("gradient {:?} for {} {:?}", g.shape(), p.name, p.value.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                index: i,
                name: p.name.clone(),
                step: state.step + 1,
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t);
    for ((p, g), (m, v)) in state
        .params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let iter = p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((theta, &gi), (mi, vi)) in iter {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_state(v: f64) -> ModelParams {
        ModelParams::new(vec![Param {
            name: String::from("theta"),
            value: Tensor::scalar(v),
        }])
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut s = scalar_state(0.5);
        adam_step(&mut s, &[Tensor::scalar(0.0)], &AdamConfig::default()).unwrap();
        assert_eq!(s.params[0].value.data(), &[0.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_state(0.0);
        adam_step(&mut s, &[Tensor::scalar(1.0)], &AdamConfig::default()).unwrap();
        assert!((s.params[0].value.data()[0] + 1e-4).abs() < 1e-11);
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let mut s = scalar_state(2.0);
        let err = adam_step(&mut s, &[Tensor::scalar(f64::NAN)], &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 0, step: 1, .. }));
        assert_eq!(s.step, 0);
        assert_eq!(s.params[0].value.data(), &[2.0]);
    }
}
