//! RMSprop with per-update learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub rho: f64,
    pub epsilon: f64,
    /// `lr_eff = lr / (1 + decay · iterations)`.
    pub decay: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 1e-3,
            rho: 0.9,
            epsilon: 1e-7,
            decay: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RmsProp<T> {
    pub config: RmsPropConfig,
    pub iterations: u64,
    /// Squared-gradient running averages, one per parameter tensor.
    pub accumulators: Vec<Vec<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(config: RmsPropConfig, params: &[Param<T>]) -> Self {
        RmsProp {
            config,
            iterations: 0,
            accumulators: params
                .iter()
                .map(|p| vec![T::zero(); p.value.numel()])
                .collect(),
        }
    }

    pub fn effective_lr(&self) -> f64 {
        self.config.lr / (1.0 + self.config.decay * self.iterations as f64)
    }

    /// Apply one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Param<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.accumulators.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.accumulators.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(crate::error::mismatch(
                    "rmsprop_step",
                    p.value.shape(),
                    g.shape(),
                ));
            }
            if !g.all_finite() {
                let bad = g.data().iter().filter(|v| !v.is_finite()).count();
                return Err(Error::Numeric(format!(
                    "non-finite gradient for `{}` ({bad} of {} entries) at iteration {}",
                    p.name,
                    g.numel(),
                    self.iterations
                )));
            }
        }
        let lr = T::of(self.effective_lr());
        let rho = T::of(self.config.rho);
        let one_rho = T::one() - rho;
        let eps = T::of(self.config.epsilon);
        for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.accumulators) {
            for ((w, &gv), a) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(acc.iter_mut())
            {
                *a = rho * *a + one_rho * gv * gv;
                *w = *w - lr * gv / (a.sqrt() + eps);
            }
        }
        self.iterations += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    fn one(v: f64) -> Vec<Param<f64>> {
        vec![Param {
            name: "w".into(),
            kind: ParamKind::Kernel,
            value: Tensor::full(&[1], v),
        }]
    }

    #[test]
    fn first_step_magnitude_and_shrinking() {
        let mut p = one(0.0);
        let mut opt = RmsProp::new(RmsPropConfig::default(), &p);
        let g = Tensor::full(&[1], 1.0);
        opt.step(&mut p, &[&g]).unwrap();
        let d1 = p[0].value.data()[0];
        assert!((d1 + 0.001 / (0.1f64.sqrt() + 1e-7)).abs() < 1e-12);
        assert!((d1 + 0.0031623).abs() < 1e-6);
        opt.step(&mut p, &[&g]).unwrap();
        let d2 = p[0].value.data()[0] - d1;
        assert!(d2.abs() < d1.abs());
        assert!((opt.effective_lr() - 1e-3 / (1.0 + 2e-6)).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_is_identity_and_nan_aborts() {
        let mut p = one(1.5);
        let mut opt = RmsProp::new(RmsPropConfig::default(), &p);
        opt.step(&mut p, &[&Tensor::zeros(&[1])]).unwrap();
        assert_eq!(p[0].value.data()[0], 1.5);
        let err = opt
            .step(&mut p, &[&Tensor::full(&[1], f64::NAN)])
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p[0].value.data()[0], 1.5);
        assert_eq!(opt.iterations, 1);
    }
}
