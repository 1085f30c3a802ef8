//! WATT-EffNet-d-k networks: configuration, construction and forward pass.

mod calibrate;
mod checkpoint;
mod summary;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use calibrate::{
    calibrate_base_widths, reference_param_counts, search_best, search_family, CalibrationReport,
    FamilyFit, SearchSpace, Targets,
};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use summary::{count_flops, count_params, LayerRow, ModelSummary};

use crate::block::{BlockPolicy, WattStage};
use crate::error::{config, Result};
use crate::nn::{BatchNorm, Conv, Ctx, Dense, Mode, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Side of the stem convolution.
pub const STEM_KERNEL: usize = 3;

/// Classifier head after global average pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// `dense(num_classes)`.
    Dense,
    /// `dense(h) + ReLU → dense(num_classes)`.
    Hidden(usize),
}

/// Full architectural description of one network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub d: usize,
    pub k: usize,
    pub attention: bool,
    /// `[H, W, C]`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    /// Per-stage base filter counts `l`; stage `i` uses `k · base_widths[i]`.
    pub base_widths: Vec<usize>,
    pub stem_filters: usize,
    pub head: Head,
    pub policy: BlockPolicy,
    /// Enforce the sub-million parameter budget at build time.
    pub strict_budget: bool,
}

/// Block policy selected by calibration against the reference parameter counts.
pub const CALIBRATED_POLICY: BlockPolicy = BlockPolicy {
    conv_bias: false,
    se_ratio: 4,
    se_bias: true,
    attention_reduction: 4,
    attention_bias: true,
    spatial_bias: true,
    projection_skip: false,
};

/// Calibrated `(base_widths, stem_filters, head)` for the reference depths.
pub fn preset(d: usize) -> Option<(Vec<usize>, usize, Head)> {
    match d {
        1 => Some((vec![16], 13, Head::Hidden(118))),
        3 => Some((vec![4, 12, 84], 4, Head::Hidden(216))),
        5 => Some((vec![24, 52, 52, 72, 96], 69, Head::Hidden(628))),
        _ => None,
    }
}

/// Parameter budget for every reference variant.
pub const PARAM_BUDGET: usize = 1_000_000;

impl ArchConfig {
    /// WATT-EffNet-d-k with the calibrated widths for d ∈ {1, 3, 5}. Other
    /// depths repeat a 16-filter stage behind a 16-filter stem and a plain
    /// dense head.
    pub fn watt(d: usize, k: usize) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(config(format!("d and k must be at least 1 (d={d}, k={k})")));
        }
        let (base_widths, stem_filters, head) =
            preset(d).unwrap_or_else(|| (vec![16; d], 16, Head::Dense));
        let cfg = ArchConfig {
            d,
            k,
            attention: true,
            input_shape: [224, 224, 3],
            num_classes: 5,
            base_widths,
            stem_filters,
            head,
            policy: CALIBRATED_POLICY,
            strict_budget: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_attention(mut self, on: bool) -> Self {
        self.attention = on;
        self
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input_shape = [h, w, self.input_shape[2]];
        self
    }

    pub fn name(&self) -> String {
        format!("WATT-EffNet-{}-{}", self.d, self.k)
    }

    /// Widened filter count of every stage.
    pub fn widths(&self) -> Vec<usize> {
        self.base_widths.iter().map(|l| l * self.k).collect()
    }

    /// Depthwise stride of stage `i`.
    pub fn stage_stride(i: usize) -> usize {
        if i == 0 {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 {
            return Err(config(format!(
                "d and k must be at least 1 (d={}, k={})",
                self.d, self.k
            )));
        }
        if self.base_widths.len() != self.d {
            return Err(config(format!(
                "base_widths has {} entries, expected d={}",
                self.base_widths.len(),
                self.d
            )));
        }
        if self.base_widths.contains(&0) || self.stem_filters == 0 || self.num_classes == 0 {
            return Err(config(
                "widths, stem filters and class count must be positive",
            ));
        }
        if self.input_shape.contains(&0) {
            return Err(config(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        if matches!(self.head, Head::Hidden(0)) {
            return Err(config("hidden head width must be positive"));
        }
        let p = &self.policy;
        for w in self.widths() {
            if p.se_ratio == 0 || w % p.se_ratio != 0 {
                return Err(config(format!(
                    "SE ratio {} does not divide width {w}",
                    p.se_ratio
                )));
            }
            if self.attention && (p.attention_reduction == 0 || w % p.attention_reduction != 0) {
                return Err(config(format!(
                    "attention reduction {} does not divide width {w}",
                    p.attention_reduction
                )));
            }
        }
        if self.strict_budget {
            let n = summary::total_params(self).unwrap_or(usize::MAX);
            if n >= PARAM_BUDGET {
                return Err(config(format!(
                    "{} has {n} parameters, budget is {PARAM_BUDGET}",
                    self.name()
                )));
            }
        }
        Ok(())
    }
}

/// Logits before and probabilities after the final softmax.
pub struct Output<'t, T: Scalar> {
    pub logits: Var<'t, T>,
    pub probs: Var<'t, T>,
}

/// A built network and its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ArchConfig,
    pub store: ParamStore<T>,
    pub stem: Conv,
    pub stem_bn: BatchNorm,
    pub stages: Vec<WattStage>,
    pub hidden: Option<Dense>,
    pub classifier: Dense,
}

impl<T: Scalar> Model<T> {
    /// Build with parameters drawn deterministically from `seed`.
    pub fn build(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = config.policy;
        let c_in = config.input_shape[2];
        let stem = Conv::new(
            &mut store,
            &mut rng,
            "stem",
            c_in,
            config.stem_filters,
            STEM_KERNEL,
            2,
            1,
            p.conv_bias,
        );
        let stem_bn = BatchNorm::new(&mut store, "stem_bn", config.stem_filters);
        let mut stages = Vec::with_capacity(config.d);
        let mut ch = config.stem_filters;
        for (i, w) in config.widths().into_iter().enumerate() {
            let name = format!("stage{}", i + 1);
            let stride = ArchConfig::stage_stride(i);
            stages.push(WattStage::new(
                &mut store,
                &mut rng,
                &name,
                ch,
                w,
                stride,
                config.attention,
                &p,
            )?);
            ch = w;
        }
        let (hidden, feat) = match config.head {
            Head::Dense => (None, ch),
            Head::Hidden(h) => (
                Some(Dense::new(&mut store, &mut rng, "head/hidden", ch, h, true)),
                h,
            ),
        };
        let classifier = Dense::new(
            &mut store,
            &mut rng,
            "head/classifier",
            feat,
            config.num_classes,
            true,
        );
        Ok(Model {
            config: config.clone(),
            store,
            stem,
            stem_bn,
            stages,
            hidden,
            classifier,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.count()
    }

    /// Forward `x: [N, C, H, W]` through the network on `ctx`'s tape.
    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Output<'t, T>> {
        let s = x.shape();
        let [h, w, c] = self.config.input_shape;
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            return Err(config(format!(
                "{} expects input [N, {c}, {h}, {w}], got {s:?}",
                self.config.name()
            )));
        }
        let mut y = self
            .stem_bn
            .forward(ctx, self.stem.forward(ctx, x)?)?
            .relu();
        for stage in &self.stages {
            y = stage.forward(ctx, y)?;
        }
        let n = s[0];
        let ch = y.shape()[1];
        ctx.record("gap");
        let mut f = y.global_avg_pool()?.reshape(&[n, ch])?;
        if let Some(hd) = &self.hidden {
            f = hd.forward(ctx, f)?.relu();
        }
        let logits = self.classifier.forward(ctx, f)?;
        ctx.record("softmax");
        let probs = logits.softmax(1)?;
        Ok(Output { logits, probs })
    }

    /// Class probabilities for `x` in inference mode, evaluated in chunks of `batch`.
    pub fn predict(&self, x: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
        Ok(self.infer(x, batch)?.1)
    }

    /// Logits and probabilities for `x` in inference mode, evaluated in chunks of `batch`.
    pub fn infer(&self, x: &Tensor<T>, batch: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = x.shape().to_vec();
        if s.len() != 4 {
            return Err(config(format!("predict expects [N, C, H, W], got {s:?}")));
        }
        let per = s[1] * s[2] * s[3];
        let batch = batch.max(1);
        let k = self.config.num_classes;
        let (mut logits, mut probs) = (Vec::with_capacity(s[0] * k), Vec::with_capacity(s[0] * k));
        for start in (0..s[0]).step_by(batch) {
            let n = batch.min(s[0] - start);
            let chunk = Tensor::new(
                &[n, s[1], s[2], s[3]],
                x.data()[start * per..(start + n) * per].to_vec(),
            )?;
            let tape = Tape::new();
            let vars = self.store.bind_frozen(&tape);
            let ctx = Ctx::new(&tape, &vars, &self.store, Mode::Eval);
            let o = self.forward(&ctx, tape.constant(chunk))?;
            logits.extend_from_slice(o.logits.value().data());
            probs.extend_from_slice(o.probs.value().data());
        }
        Ok((
            Tensor::new(&[s[0], k], logits)?,
            Tensor::new(&[s[0], k], probs)?,
        ))
    }

    /// Trainable parameters attributable to attention.
    pub fn attention_params(&self) -> usize {
        self.stages.iter().map(|s| s.attention_params()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_build_and_count() {
        let m = Model::<f32>::build(&ArchConfig::watt(1, 2).unwrap(), 0).unwrap();
        assert_eq!(m.num_params(), 8501);
        assert_eq!(m.stages[0].block.width(), 32);
        let m5 = Model::<f32>::build(&ArchConfig::watt(5, 3).unwrap(), 0).unwrap();
        assert_eq!(m5.num_params(), 720_233);
    }

    #[test]
    fn widening_doubles_stage_channels() {
        let a = ArchConfig::watt(3, 1).unwrap();
        let b = ArchConfig::watt(3, 2).unwrap();
        for (x, y) in a.widths().iter().zip(b.widths()) {
            assert_eq!(2 * x, y);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ArchConfig::watt(1, 3).unwrap();
        let a = Model::<f32>::build(&cfg, 7).unwrap();
        let b = Model::<f32>::build(&cfg, 7).unwrap();
        let c = Model::<f32>::build(&cfg, 8).unwrap();
        let bits = |m: &Model<f32>| -> Vec<u32> {
            m.store
                .params
                .iter()
                .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ArchConfig::watt(0, 2).is_err());
        let mut cfg = ArchConfig::watt(3, 2).unwrap();
        cfg.base_widths.pop();
        assert!(Model::<f32>::build(&cfg, 0).is_err());
        let mut cfg = ArchConfig::watt(1, 2).unwrap();
        cfg.policy.se_ratio = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn small_input_forward_is_a_distribution() {
        let cfg = ArchConfig::watt(1, 2).unwrap().with_input(32, 32);
        let m = Model::<f64>::build(&cfg, 3).unwrap();
        let x = Tensor::full(&[2, 3, 32, 32], 0.3);
        let p = m.predict(&x, 1).unwrap();
        assert_eq!(p.shape(), &[2, 5]);
        for row in p.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
