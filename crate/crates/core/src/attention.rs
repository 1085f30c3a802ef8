//! Channel and spatial attention gates and their sequential composition.
//!
//! The channel gate runs a shared two-layer MLP over the globally average- and
//! max-pooled descriptors and sums the two branches before the sigmoid. The
//! spatial gate convolves the channel-wise mean and max maps with a 7×7
//! kernel. Both gates are applied as broadcast products, channel first.

use rand_chacha::ChaCha8Rng;

use crate::error::{config, Result};
use crate::nn::{glorot, Ctx, ParamKind, ParamStore};
use crate::tensor::{Padding, Scalar, Tensor, Var};

/// Side of the spatial attention kernel.
pub const SPATIAL_KERNEL: usize = 7;

/// `M_c = σ(Ω1·ReLU(Ω0·gap(Φ) + b0) + b1 + Ω1·ReLU(Ω0·gmp(Φ) + b0) + b1)`, shape `[N, C, 1, 1]`.
///
/// `omega0: [C/r, C]`, `omega1: [C, C/r]`; the same weights serve both branches.
pub fn channel_attention<'t, T: Scalar>(
    phi: Var<'t, T>,
    omega0: Var<'t, T>,
    bias0: Option<Var<'t, T>>,
    omega1: Var<'t, T>,
    bias1: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let s = phi.shape();
    let (w0, w1) = (omega0.shape(), omega1.shape());
    if s.len() != 4
        || w0.len() != 2
        || w1.len() != 2
        || w0[1] != s[1]
        || w1[0] != s[1]
        || w1[1] != w0[0]
    {
        return Err(config(format!(
            "channel attention: input {s:?} incompatible with Ω0 {w0:?} / Ω1 {w1:?}"
        )));
    }
    let (n, c) = (s[0], s[1]);
    let mlp = |v: Var<'t, T>| -> Result<Var<'t, T>> {
        v.linear(omega0, bias0)?.relu().linear(omega1, bias1)
    };
    let avg = mlp(phi.global_avg_pool()?.reshape(&[n, c])?)?;
    let max = mlp(phi.global_max_pool()?.reshape(&[n, c])?)?;
    avg.add(max)?.sigmoid().reshape(&[n, c, 1, 1])
}

/// `M_s = σ(conv7×7([mean_c(Φ); max_c(Φ)]) + b)`, shape `[N, 1, H, W]`.
pub fn spatial_attention<'t, T: Scalar>(
    phi: Var<'t, T>,
    kernel: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let ks = kernel.shape();
    if ks != [1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL] {
        return Err(config(format!(
            "spatial attention kernel must be [1, 2, 7, 7], got {ks:?}"
        )));
    }
    let pooled = Var::concat(&[phi.channel_mean()?, phi.channel_max()?], 1)?;
    Ok(pooled.conv2d(kernel, bias, 1, Padding::Same, 1)?.sigmoid())
}

/// Trainable attention weights registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Attention {
    pub name: String,
    pub channels: usize,
    pub hidden: usize,
    pub omega0: usize,
    pub bias0: Option<usize>,
    pub omega1: usize,
    pub bias1: Option<usize>,
    pub spatial: usize,
    pub spatial_bias: Option<usize>,
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        reduction: usize,
        mlp_bias: bool,
        spatial_bias: bool,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(config(format!(
                "attention reduction {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        let omega0 = store.add(
            format!("{name}/mlp0/kernel"),
            ParamKind::Kernel,
            glorot(rng, &[hidden, channels], channels, hidden),
        );
        let bias0 = mlp_bias.then(|| {
            store.add(
                format!("{name}/mlp0/bias"),
                ParamKind::Bias,
                Tensor::zeros(&[hidden]),
            )
        });
        let omega1 = store.add(
            format!("{name}/mlp1/kernel"),
            ParamKind::Kernel,
            glorot(rng, &[channels, hidden], hidden, channels),
        );
        let bias1 = mlp_bias.then(|| {
            store.add(
                format!("{name}/mlp1/bias"),
                ParamKind::Bias,
                Tensor::zeros(&[channels]),
            )
        });
        let rf = SPATIAL_KERNEL * SPATIAL_KERNEL;
        let spatial = store.add(
            format!("{name}/spatial/kernel"),
            ParamKind::Kernel,
            glorot(rng, &[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL], 2 * rf, rf),
        );
        let spatial_bias = spatial_bias.then(|| {
            store.add(
                format!("{name}/spatial/bias"),
                ParamKind::Bias,
                Tensor::zeros(&[1]),
            )
        });
        Ok(Attention {
            name: name.to_string(),
            channels,
            hidden,
            omega0,
            bias0,
            omega1,
            bias1,
            spatial,
            spatial_bias,
        })
    }

    /// Returns `(Φ'', M_c, M_s)`.
    pub fn gates<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        phi: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
        ctx.record(&format!("{}/channel", self.name));
        let mc = channel_attention(
            phi,
            ctx.var(self.omega0),
            ctx.opt(self.bias0),
            ctx.var(self.omega1),
            ctx.opt(self.bias1),
        )?;
        let refined = phi.mul(mc)?;
        ctx.record(&format!("{}/spatial", self.name));
        let ms = spatial_attention(refined, ctx.var(self.spatial), ctx.opt(self.spatial_bias))?;
        Ok((refined.mul(ms)?, mc, ms))
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        phi: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        Ok(self.gates(ctx, phi)?.0)
    }

    pub fn params(&self) -> usize {
        let mlp =
            2 * self.channels * self.hidden + self.bias0.map_or(0, |_| self.hidden + self.channels);
        mlp + 2 * SPATIAL_KERNEL * SPATIAL_KERNEL + self.spatial_bias.map_or(0, |_| 1)
    }

    /// MACs on an `h × w` map: both MLP branches, the 7×7 conv, the two
    /// pooling passes per gate and the two gating products.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (c, hw) = (self.channels as u64, (h * w) as u64);
        let mlp = 2 * 2 * c * self.hidden as u64;
        let pools = 2 * c * hw + 2 * c * hw;
        let conv = hw * (SPATIAL_KERNEL * SPATIAL_KERNEL * 2) as u64;
        let gating = 2 * c * hw;
        mlp + pools + conv + gating
    }
}
