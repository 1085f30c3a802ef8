//! Losses, optimizer, class balancing, metrics and the training loop.

mod loss;
mod metrics;
mod optim;
mod sampling;
mod trainer;

pub use loss::{combined_loss, loss_value, one_hot, LossConfig, LossTerms};
pub use metrics::{evaluate, pr_curve, ConfusionMatrix, EvalReport, PrPoint, PR_THRESHOLDS};
pub use optim::{RmsProp, RmsPropConfig};
pub use sampling::undersample;
pub use trainer::{train, EpochRecord, History, TrainConfig, TrainOutcome};
