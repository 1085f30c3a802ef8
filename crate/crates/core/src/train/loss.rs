//! Combined classification objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Output;
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub cosine_weight: f64,
    /// Coefficient on Σ‖kernel‖². Biases and BN parameters are not decayed.
    pub l2_coeff: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ce_weight: 1.0,
            cosine_weight: 1.0,
            l2_coeff: 1e-4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.ce_weight, self.cosine_weight, self.l2_coeff];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(crate::error::config(format!(
                "loss weights must be finite and >= 0, got {w:?}"
            )));
        }
        Ok(())
    }
}

/// `[n, classes]` one-hot rows.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidInput(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        data[i * classes + l] = T::one();
    }
    Tensor::new(&[labels.len(), classes], data)
}

/// The loss graph node plus the value of each term, for logging.
pub struct LossTerms<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub ce: f64,
    pub cosine: f64,
    pub l2: f64,
}

/// `ce_weight·CE(probs) + cosine_weight·cos(logits) + l2_coeff·Σ‖kernel‖²`.
///
/// `vars` must be the store's parameters bound on the same tape as `out`.
pub fn combined_loss<'t, T: Scalar>(
    cfg: &LossConfig,
    out: &Output<'t, T>,
    targets: &Tensor<T>,
    store: &ParamStore<T>,
    vars: &[Var<'t, T>],
) -> Result<LossTerms<'t, T>> {
    let ce = out.probs.cross_entropy(targets)?;
    let cos = out.logits.cosine_loss(targets)?;
    let mut total = ce
        .scale(T::of(cfg.ce_weight))
        .add(cos.scale(T::of(cfg.cosine_weight)))?;
    let mut l2 = 0.0;
    if cfg.l2_coeff > 0.0 {
        let mut acc: Option<Var<'t, T>> = None;
        for (p, v) in store.params.iter().zip(vars) {
            if p.kind == ParamKind::Kernel {
                let sq = v.sum_squares();
                acc = Some(match acc {
                    Some(a) => a.add(sq)?,
                    None => sq,
                });
            }
        }
        if let Some(a) = acc {
            let reg = a.scale(T::of(cfg.l2_coeff));
            l2 = reg.value().data()[0].f64();
            total = total.add(reg)?;
        }
    }
    Ok(LossTerms {
        total,
        ce: ce.value().data()[0].f64(),
        cosine: cos.value().data()[0].f64(),
        l2,
    })
}

/// Loss value from already computed logits and probabilities, without a tape.
pub fn loss_value<T: Scalar>(
    cfg: &LossConfig,
    logits: &Tensor<T>,
    probs: &Tensor<T>,
    targets: &Tensor<T>,
    store: &ParamStore<T>,
) -> Result<f64> {
    let tape = crate::tensor::Tape::new();
    let out = Output {
        logits: tape.constant(logits.clone()),
        probs: tape.constant(probs.clone()),
    };
    let vars = store.bind_frozen(&tape);
    Ok(combined_loss(cfg, &out, targets, store, &vars)?
        .total
        .value()
        .data()[0]
        .f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn ce_oracles() {
        let tape = Tape::<f64>::new();
        let p = tape.constant(
            Tensor::from_f64(&[2, 5], &[1., 0., 0., 0., 0., 0.2, 0.2, 0.2, 0.2, 0.2]).unwrap(),
        );
        let t = one_hot::<f64>(&[0, 3], 5).unwrap();
        let v = p.cross_entropy(&t).unwrap().value().data()[0];
        assert!((v - 0.804_718_956_217_050_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_three_four() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 2], &[3., 4.]).unwrap());
        let v = x
            .cosine_loss(&one_hot(&[0], 2).unwrap())
            .unwrap()
            .value()
            .data()[0];
        assert!((v - 0.4).abs() < 1e-12);
    }

    #[test]
    fn single_kernel_regulariser_and_decomposition() {
        let mut store = ParamStore::<f64>::new();
        store.add("k", ParamKind::Kernel, Tensor::full(&[1, 1, 1, 1], 2.0));
        store.add("b", ParamKind::Bias, Tensor::full(&[1], 5.0));
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let logits = Tensor::from_f64(&[1, 2], &[3., 4.]).unwrap();
        let probs = Tensor::from_f64(&[1, 2], &[0.25, 0.75]).unwrap();
        let out = Output {
            logits: tape.constant(logits),
            probs: tape.constant(probs),
        };
        let t = one_hot(&[0], 2).unwrap();
        let terms = combined_loss(&LossConfig::default(), &out, &t, &store, &vars).unwrap();
        assert!((terms.l2 - 4e-4).abs() < 1e-15);
        let total = terms.total.value().data()[0];
        assert!((total - (terms.ce + terms.cosine + terms.l2)).abs() < 1e-15);
        assert!((terms.ce - 4f64.ln()).abs() < 1e-12);
        let g = tape.backward(terms.total).unwrap();
        assert!((g.wrt(vars[0]).unwrap().data()[0] - 4e-4).abs() < 1e-15);
        assert_eq!(g.wrt(vars[1]).unwrap().data()[0], 0.0);
    }

    #[test]
    fn perfect_prediction_with_zero_kernels_is_zero() {
        let mut store = ParamStore::<f64>::new();
        store.add("k", ParamKind::Kernel, Tensor::zeros(&[3, 3]));
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let out = Output {
            logits: tape.constant(Tensor::from_f64(&[1, 3], &[0., 7., 0.]).unwrap()),
            probs: tape.constant(Tensor::from_f64(&[1, 3], &[0., 1., 0.]).unwrap()),
        };
        let t = one_hot(&[1], 3).unwrap();
        let v = combined_loss(&LossConfig::default(), &out, &t, &store, &vars).unwrap();
        assert!(v.total.value().data()[0].abs() < 1e-12);
        assert!(one_hot::<f64>(&[3], 3).is_err());
        assert!(LossConfig {
            l2_coeff: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
