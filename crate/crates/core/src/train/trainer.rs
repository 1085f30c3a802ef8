//! Mini-batch training loop with best-validation-F1 selection.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{combined_loss, loss_value, one_hot, LossConfig};
use super::metrics::EvalReport;
use super::optim::{RmsProp, RmsPropConfig};
use super::sampling::undersample;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Ctx, Mode};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: RmsPropConfig,
    pub loss: LossConfig,
    /// Balance the train and validation sets before training.
    pub undersample: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch: 32,
            seed: 0,
            optimizer: RmsPropConfig::default(),
            loss: LossConfig::default(),
            undersample: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch (batch statistics in BN).
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Percent.
    pub valid_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,valid_loss,valid_f1\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{:.8},{:.8},{:.4}\n",
                r.epoch, r.train_loss, r.valid_loss, r.valid_f1
            ));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Weights from the epoch with the best validation macro F1, or the
    /// initial weights when no epoch completed.
    pub model: Model<T>,
    pub history: History,
    pub best_epoch: Option<usize>,
    pub best_f1: f64,
    /// Set when training stopped early on a numeric failure.
    pub aborted: Option<String>,
}

/// Sub-seeds for train balancing, validation balancing and shuffling.
fn sub_seeds(seed: u64) -> [u64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [rng.random(), rng.random(), rng.random()]
}

/// One optimizer step on the samples `idx`; returns the batch loss.
fn step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut RmsProp<T>,
    data: &LabeledDataset,
    idx: &[usize],
    cfg: &TrainConfig,
    frozen: bool,
) -> Result<f64> {
    let (x, labels) = data.batch(idx)?;
    let targets = one_hot::<T>(&labels, model.config.num_classes)?;
    let tape = Tape::new();
    let vars = model.store.bind(&tape);
    let ctx = Ctx::new(&tape, &vars, &model.store, Mode::Train);
    let out = model.forward(&ctx, tape.constant(x.cast::<T>()))?;
    let terms = combined_loss(&cfg.loss, &out, &targets, &model.store, &vars)?;
    let updates = ctx.take_updates();
    drop(ctx);
    let loss = terms.total.value().data()[0].f64();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} (ce {}, cosine {}, l2 {})",
            terms.ce, terms.cosine, terms.l2
        )));
    }
    if frozen {
        return Ok(loss);
    }
    let grads = tape.backward(terms.total)?;
    let g: Vec<&Tensor<T>> = vars
        .iter()
        .map(|v| {
            grads
                .wrt(*v)
                .ok_or_else(|| Error::Contract("missing parameter gradient".into()))
        })
        .collect::<Result<_>>()?;
    opt.step(&mut model.store.params, &g)?;
    model.store.apply_bn_updates(updates);
    Ok(loss)
}

/// Train `model` on `train`, selecting by macro F1 on `valid`.
///
/// Deterministic given `cfg.seed`. A zero learning rate freezes all model
/// state, BN running statistics included. A non-finite loss or gradient
/// stops training and returns the best weights seen so far with
/// `aborted` set.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    train: &LabeledDataset,
    valid: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.loss.validate()?;
    if cfg.batch == 0 {
        return Err(crate::error::config("batch size must be positive"));
    }
    let k = model.config.num_classes;
    for (what, d) in [("train", train), ("valid", valid)] {
        if d.is_empty() {
            return Err(Error::InvalidInput(format!("{what} set is empty")));
        }
        if d.num_classes() != k {
            return Err(crate::error::config(format!(
                "model has {k} classes, {what} set has {}",
                d.num_classes()
            )));
        }
    }
    let [s_train, s_valid, s_shuffle] = sub_seeds(cfg.seed);
    let train_idx: Vec<usize> = if cfg.undersample {
        undersample(&train.labels, k, s_train)?
    } else {
        (0..train.len()).collect()
    };
    let valid = if cfg.undersample {
        valid.subset(&undersample(&valid.labels, k, s_valid)?)
    } else {
        valid.clone()
    };
    let all: Vec<usize> = (0..valid.len()).collect();
    let (vx, vy) = valid.batch(&all)?;
    let vx = vx.cast::<T>();
    let vt = one_hot::<T>(&vy, k)?;

    let frozen = cfg.optimizer.lr == 0.0;
    let mut opt = RmsProp::new(cfg.optimizer, &model.store.params);
    let mut rng = ChaCha8Rng::seed_from_u64(s_shuffle);
    let mut history = History::default();
    let mut best: Option<(Model<T>, usize, f64)> = None;
    let mut aborted = None;

    'epochs: for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            match step(&mut model, &mut opt, train, chunk, cfg, frozen) {
                Ok(l) => total += l * chunk.len() as f64,
                Err(Error::Numeric(msg)) => {
                    aborted = Some(format!("epoch {epoch}: {msg}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = total / order.len() as f64;
        let (logits, probs) = model.infer(&vx, cfg.batch)?;
        let valid_loss = loss_value(&cfg.loss, &logits, &probs, &vt, &model.store)?;
        if !valid_loss.is_finite() {
            aborted = Some(format!(
                "epoch {epoch}: non-finite validation loss {valid_loss}"
            ));
            break;
        }
        let valid_f1 = EvalReport::from_scores(&probs, &vy, &valid.class_names)?.macro_f1;
        log::info!(
            "epoch {epoch}/{}: train {train_loss:.5} valid {valid_loss:.5} f1 {valid_f1:.2}%",
            cfg.epochs
        );
        history.records.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            valid_f1,
        });
        if best.as_ref().is_none_or(|b| valid_f1 > b.2) {
            best = Some((model.clone(), epoch, valid_f1));
        }
    }
    if let Some(msg) = &aborted {
        log::error!("training aborted, keeping last good checkpoint: {msg}");
    }
    let (model, best_epoch, best_f1) = match best {
        Some((m, e, f)) => (m, Some(e), f),
        None => (model, None, 0.0),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_f1,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::synthetic_dataset;
    use crate::model::ArchConfig;

    fn tiny() -> Model<f32> {
        let cfg = ArchConfig::watt(1, 1).unwrap().with_input(16, 16);
        Model::build(&cfg, 3).unwrap()
    }

    #[test]
    fn zero_lr_freezes_everything() {
        let data = synthetic_dataset(3, 16, 0);
        let m0 = tiny();
        let cfg = TrainConfig {
            epochs: 3,
            batch: 4,
            optimizer: RmsPropConfig {
                lr: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = train(m0.clone(), &data, &data, &cfg).unwrap();
        assert_eq!(out.history.len(), 3);
        for (a, b) in out.model.store.params.iter().zip(&m0.store.params) {
            assert_eq!(a.value, b.value);
        }
        let r = &out.history.records;
        assert!(r
            .iter()
            .all(|e| e.valid_loss == r[0].valid_loss && e.valid_f1 == r[0].valid_f1));
    }

    #[test]
    fn deterministic_history() {
        let data = synthetic_dataset(2, 16, 1);
        let cfg = TrainConfig {
            epochs: 2,
            batch: 3,
            seed: 11,
            ..Default::default()
        };
        let a = train(tiny(), &data, &data, &cfg).unwrap();
        let b = train(tiny(), &data, &data, &cfg).unwrap();
        assert_eq!(a.history.to_csv(), b.history.to_csv());
        assert!(a
            .history
            .to_csv()
            .starts_with("epoch,train_loss,valid_loss,valid_f1\n1,"));
    }

    #[test]
    fn rejects_class_count_mismatch() {
        let mut data = synthetic_dataset(1, 16, 0);
        data.class_names.push("extra".into());
        assert!(train(tiny(), &data, &data, &TrainConfig::default()).is_err());
    }
}
