//! Wide MBConv block, squeeze-and-excite, and the attention-refined residual stage.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Attention;
use crate::error::{config, Result};
use crate::nn::{BatchNorm, Conv, Ctx, Dense, ParamStore};
use crate::tensor::{Scalar, Var};

/// Depthwise kernel side inside every block.
pub const DEPTHWISE_KERNEL: usize = 5;

/// Structural switches that change parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPolicy {
    /// Bias on convolutions that feed a batch norm.
    pub conv_bias: bool,
    /// Squeeze-and-excite reduction ρ.
    pub se_ratio: usize,
    pub se_bias: bool,
    /// Channel-attention MLP reduction r.
    pub attention_reduction: usize,
    pub attention_bias: bool,
    pub spatial_bias: bool,
    /// Project the skip path with 1×1 conv + BN when channels differ.
    /// When false a channel change drops the residual for that stage.
    pub projection_skip: bool,
}

impl Default for BlockPolicy {
    fn default() -> Self {
        BlockPolicy {
            conv_bias: false,
            se_ratio: 4,
            se_bias: true,
            attention_reduction: 8,
            attention_bias: false,
            spatial_bias: true,
            projection_skip: true,
        }
    }
}

/// `x · σ(W_ex·ReLU(W_sq·gap(x)))`.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub squeeze: Dense,
    pub excite: Dense,
}

impl SqueezeExcite {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        ratio: usize,
        bias: bool,
    ) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(config(format!(
                "SE ratio {ratio} does not divide {channels} channels"
            )));
        }
        let hidden = channels / ratio;
        Ok(SqueezeExcite {
            squeeze: Dense::new(
                store,
                rng,
                &format!("{name}/squeeze"),
                channels,
                hidden,
                bias,
            ),
            excite: Dense::new(
                store,
                rng,
                &format!("{name}/excite"),
                hidden,
                channels,
                bias,
            ),
        })
    }

    /// The per-channel gate `[N, C, 1, 1]`.
    pub fn gate<'t, T: Scalar>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.squeeze.d_in {
            return Err(config(format!(
                "SE expects {} channels, input is {s:?}",
                self.squeeze.d_in
            )));
        }
        let pooled = x.global_avg_pool()?.reshape(&[s[0], s[1]])?;
        let h = self.squeeze.forward(ctx, pooled)?.relu();
        self.excite
            .forward(ctx, h)?
            .sigmoid()
            .reshape(&[s[0], s[1], 1, 1])
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        x.mul(self.gate(ctx, x)?)
    }

    pub fn params(&self) -> usize {
        self.squeeze.params() + self.excite.params()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let c = self.squeeze.d_in as u64;
        self.squeeze.macs() + self.excite.macs() + 2 * c * (h * w) as u64
    }
}

/// 1×1 expand → 5×5 depthwise → SE → 1×1 project, each conv followed by BN + ReLU.
#[derive(Clone, Debug)]
pub struct WideMbConv {
    pub expand: Conv,
    pub expand_bn: BatchNorm,
    pub depthwise: Conv,
    pub depthwise_bn: BatchNorm,
    pub se: SqueezeExcite,
    pub project: Conv,
    pub project_bn: BatchNorm,
}

impl WideMbConv {
    /// `width` is the widened filter count `k·l`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        width: usize,
        stride: usize,
        policy: &BlockPolicy,
    ) -> Result<Self> {
        if c_in == 0 || width == 0 || stride == 0 {
            return Err(config(format!(
                "{name}: channels and stride must be positive (in={c_in}, width={width}, stride={stride})"
            )));
        }
        let b = policy.conv_bias;
        let expand = Conv::new(
            store,
            rng,
            &format!("{name}/expand"),
            c_in,
            width,
            1,
            1,
            1,
            b,
        );
        let expand_bn = BatchNorm::new(store, &format!("{name}/expand_bn"), width);
        let depthwise = Conv::new(
            store,
            rng,
            &format!("{name}/depthwise"),
            width,
            width,
            DEPTHWISE_KERNEL,
            stride,
            width,
            b,
        );
        let depthwise_bn = BatchNorm::new(store, &format!("{name}/depthwise_bn"), width);
        let se = SqueezeExcite::new(
            store,
            rng,
            &format!("{name}/se"),
            width,
            policy.se_ratio,
            policy.se_bias,
        )?;
        let project = Conv::new(
            store,
            rng,
            &format!("{name}/project"),
            width,
            width,
            1,
            1,
            1,
            b,
        );
        let project_bn = BatchNorm::new(store, &format!("{name}/project_bn"), width);
        Ok(WideMbConv {
            expand,
            expand_bn,
            depthwise,
            depthwise_bn,
            se,
            project,
            project_bn,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let c = x.shape().get(1).copied().unwrap_or(0);
        if c != self.expand.c_in {
            return Err(config(format!(
                "wide MBConv expects {} input channels, got {c}",
                self.expand.c_in
            )));
        }
        let h = self
            .expand_bn
            .forward(ctx, self.expand.forward(ctx, x)?)?
            .relu();
        let h = self
            .depthwise_bn
            .forward(ctx, self.depthwise.forward(ctx, h)?)?
            .relu();
        let h = self.se.forward(ctx, h)?;
        Ok(self
            .project_bn
            .forward(ctx, self.project.forward(ctx, h)?)?
            .relu())
    }

    pub fn width(&self) -> usize {
        self.project.c_out
    }

    pub fn params(&self) -> usize {
        self.expand.params()
            + self.expand_bn.params()
            + self.depthwise.params()
            + self.depthwise_bn.params()
            + self.se.params()
            + self.project.params()
            + self.project_bn.params()
    }
}

#[derive(Clone, Debug)]
pub enum Skip {
    Identity,
    Projection { conv: Conv, bn: BatchNorm },
    None,
}

/// `y = skip(x) + attention(mbconv(x))`.
#[derive(Clone, Debug)]
pub struct WattStage {
    pub name: String,
    pub block: WideMbConv,
    pub attention: Option<Attention>,
    pub skip: Skip,
    pub stride: usize,
}

impl WattStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        width: usize,
        stride: usize,
        attention: bool,
        policy: &BlockPolicy,
    ) -> Result<Self> {
        let block = WideMbConv::new(
            store,
            rng,
            &format!("{name}/mbconv"),
            c_in,
            width,
            stride,
            policy,
        )?;
        let attention = if attention {
            Some(Attention::new(
                store,
                rng,
                &format!("{name}/attention"),
                width,
                policy.attention_reduction,
                policy.attention_bias,
                policy.spatial_bias,
            )?)
        } else {
            None
        };
        let skip = if c_in == width && stride == 1 {
            Skip::Identity
        } else if policy.projection_skip {
            let b = policy.conv_bias;
            Skip::Projection {
                conv: Conv::new(
                    store,
                    rng,
                    &format!("{name}/skip"),
                    c_in,
                    width,
                    1,
                    stride,
                    1,
                    b,
                ),
                bn: BatchNorm::new(store, &format!("{name}/skip_bn"), width),
            }
        } else {
            Skip::None
        };
        Ok(WattStage {
            name: name.to_string(),
            block,
            attention,
            skip,
            stride,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let mut y = self.block.forward(ctx, x)?;
        if let Some(att) = &self.attention {
            y = att.forward(ctx, y)?;
        }
        match &self.skip {
            Skip::Identity => {
                ctx.record(&format!("{}/skip", self.name));
                y.add(x)
            }
            Skip::Projection { conv, bn } => y.add(bn.forward(ctx, conv.forward(ctx, x)?)?),
            Skip::None => Ok(y),
        }
    }

    pub fn attention_params(&self) -> usize {
        self.attention.as_ref().map_or(0, |a| a.params())
    }

    pub fn params(&self) -> usize {
        let skip = match &self.skip {
            Skip::Projection { conv, bn } => conv.params() + bn.params(),
            _ => 0,
        };
        self.block.params() + self.attention_params() + skip
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::{Tape, Tensor};
    use rand::SeedableRng;

    fn stage(
        c_in: usize,
        width: usize,
        stride: usize,
        attention: bool,
    ) -> (ParamStore<f64>, WattStage) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = WattStage::new(
            &mut store,
            &mut rng,
            "s",
            c_in,
            width,
            stride,
            attention,
            &BlockPolicy::default(),
        )
        .unwrap();
        (store, s)
    }

    #[test]
    fn block_params_match_hand_formula() {
        for (c_in, l, k) in [(3, 4, 1), (8, 4, 2), (13, 16, 2), (16, 8, 3), (5, 12, 1)] {
            let kl = l * k;
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let b = WideMbConv::new(
                &mut store,
                &mut rng,
                "b",
                c_in,
                kl,
                1,
                &BlockPolicy::default(),
            )
            .unwrap();
            let h = kl / 4;
            let hand = c_in * kl + 25 * kl + (2 * kl * h + h + kl) + kl * kl + 3 * 2 * kl;
            assert_eq!(b.params(), hand);
            assert_eq!(store.count(), hand);
        }
    }

    #[test]
    fn zeroed_scales_reduce_stage_to_identity() {
        let (mut store, s) = stage(8, 8, 1, true);
        for p in store.params.iter_mut() {
            if matches!(p.kind, crate::nn::ParamKind::Gamma) {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let ctx = Ctx::new(&tape, &vars, &store, Mode::Train);
        let x: Vec<f64> = (0..2 * 8 * 4 * 4)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let xv = tape.constant(Tensor::from_f64(&[2, 8, 4, 4], &x).unwrap());
        let y = s.forward(&ctx, xv).unwrap().value();
        assert_eq!(y.data(), xv.value().data());
    }

    #[test]
    fn attention_changes_values_not_shape() {
        let (store_a, a) = stage(4, 8, 2, true);
        let (store_b, b) = stage(4, 8, 2, false);
        let x: Vec<f64> = (0..4 * 6 * 6).map(|i| (i as f64 * 0.11).cos()).collect();
        let run = |store: &ParamStore<f64>, s: &WattStage| {
            let tape = Tape::new();
            let vars = store.bind(&tape);
            let ctx = Ctx::new(&tape, &vars, store, Mode::Eval);
            let xv = tape.constant(Tensor::from_f64(&[1, 4, 6, 6], &x).unwrap());
            (*s.forward(&ctx, xv).unwrap().value()).clone()
        };
        let (ya, yb) = (run(&store_a, &a), run(&store_b, &b));
        assert_eq!(ya.shape(), &[1, 8, 3, 3]);
        assert_eq!(ya.shape(), yb.shape());
        assert!(ya.max_abs_diff(&yb).unwrap() > 1e-6);
        assert_eq!(a.params() - b.params(), a.attention_params());
    }

    #[test]
    fn two_stages_trace_in_order() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = BlockPolicy::default();
        let s1 = WattStage::new(&mut store, &mut rng, "s1", 3, 8, 2, true, &p).unwrap();
        let s2 = WattStage::new(&mut store, &mut rng, "s2", 8, 8, 1, true, &p).unwrap();
        let tape = Tape::new();
        let vars = store.bind(&tape);
        let ctx = Ctx::new(&tape, &vars, &store, Mode::Train).with_trace();
        let x = tape.constant(Tensor::full(&[2, 3, 8, 8], 0.5));
        s2.forward(&ctx, s1.forward(&ctx, x).unwrap()).unwrap();
        let trace = ctx.take_trace();
        let pos = |n: &str| trace.iter().position(|t| t == n).unwrap();
        assert!(pos("s1/mbconv/project_bn") < pos("s1/attention/channel"));
        assert!(pos("s1/attention/channel") < pos("s1/attention/spatial"));
        assert!(pos("s1/attention/spatial") < pos("s1/skip"));
        assert!(pos("s1/skip_bn") < pos("s2/mbconv/expand"));
        assert!(pos("s2/attention/spatial") < pos("s2/skip"));
    }
}
