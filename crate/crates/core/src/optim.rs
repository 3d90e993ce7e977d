//! RMSprop: the step is the learning rate divided by a running root mean
//! square of recent gradients.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(arg_err(
                "rmsprop",
                format!("learning rate {} must be > 0", self.learning_rate),
            ));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(arg_err("rmsprop", format!("rho {} not in [0,1)", self.rho)));
        }
        if !(self.eps > 0.0) {
            return Err(arg_err("rmsprop", format!("eps {} must be > 0", self.eps)));
        }
        Ok(())
    }
}

/// One parameter's squared-gradient moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState<T> {
    pub v: Vec<T>,
}

impl<T: Real> RmsPropState<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            v: alloc::vec![T::zero(); n],
        }
    }
}

/// `v <- rho*v + (1-rho)*g^2; theta <- theta - lr*g/(sqrt(v)+eps)`.
///
/// Gradients are checked for finiteness before anything is written.
pub fn rmsprop_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    state: &mut RmsPropState<T>,
    cfg: &RmsPropConfig,
) -> Result<()> {
    if param.len() != grad.len() || state.v.len() != param.len() {
        return Err(shape_err(
            "rmsprop_step",
            format!("param {} / grad {} / state {}", param.len(), grad.len(), state.v.len()),
        ));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient element {} is {}", i, grad[i])));
    }
    let (rho, lr, eps) = (T::of(cfg.rho), T::of(cfg.learning_rate), T::of(cfg.eps));
    let one_minus = T::one() - rho;
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(state.v.iter_mut()) {
        *v = rho * *v + one_minus * g * g;
        if g != T::zero() {
            *p -= lr * g / (v.sqrt() + eps);
        }
    }
    Ok(())
}

/// RMSprop over every parameter of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<T> {
    pub config: RmsPropConfig,
    pub states: Vec<RmsPropState<T>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(config: RmsPropConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            states: store.iter().map(|p| RmsPropState::zeros(p.value.len())).collect(),
        })
    }

    /// Applies one update from the accumulated gradients. On error nothing
    /// has been modified.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (p, _) in store.iter().zip(&self.states) {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} element {} is {}",
                    p.name, i, p.grad[i]
                )));
            }
        }
        for (p, s) in store.iter_mut().zip(&mut self.states) {
            let grad = core::mem::take(&mut p.grad);
            let r = rmsprop_step(p.value.data_mut(), &grad, s, &self.config);
            p.grad = grad;
            r?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_bit_identical_and_decays_state() {
        let cfg = RmsPropConfig::default();
        let mut p = [0.3f64, -1.7];
        let before = p;
        let mut s = RmsPropState {
            v: alloc::vec![0.5, 2.0],
        };
        rmsprop_step(&mut p, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(p[0].to_bits(), before[0].to_bits());
        assert_eq!(p[1].to_bits(), before[1].to_bits());
        assert!((s.v[0] - 0.45).abs() < 1e-15);
        assert!((s.v[1] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn first_step_hand_value() {
        let cfg = RmsPropConfig {
            learning_rate: 1e-4,
            rho: 0.9,
            eps: 1e-8,
        };
        let mut p = [0.0f64];
        let mut s = RmsPropState::zeros(1);
        rmsprop_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        assert!((s.v[0] - 0.1).abs() < 1e-15);
        // 1e-4 / (sqrt(0.1) + 1e-8)
        assert!((p[0] + 3.1623e-4).abs() < 1e-8, "{}", p[0]);
    }

    #[test]
    fn constant_gradient_steps_shrink() {
        let cfg = RmsPropConfig::default();
        let mut p = [0.0f64];
        let mut s = RmsPropState::zeros(1);
        rmsprop_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        let d1 = p[0];
        rmsprop_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        let d2 = p[0] - d1;
        assert!(d2.abs() < d1.abs());
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let cfg = RmsPropConfig::default();
        let mut p = [1.0f64, 2.0];
        let mut s = RmsPropState::zeros(2);
        assert!(matches!(
            rmsprop_step(&mut p, &[0.1, f64::NAN], &mut s, &cfg),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(s.v, alloc::vec![0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        let c = RmsPropConfig {
            rho: 1.0,
            ..RmsPropConfig::default()
        };
        assert!(c.validate().is_err());
        let c = RmsPropConfig {
            learning_rate: 0.0,
            ..RmsPropConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
