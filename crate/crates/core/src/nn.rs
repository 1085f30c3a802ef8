//! Parameter storage, forward context and the primitive layers shared by
//! the attention, block and model modules.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Padding, Scalar, Tape, Tensor, Var};

/// BN epsilon.
pub const BN_EPS: f64 = 1e-3;
/// BN running-average momentum (weight on the previous running value).
pub const BN_MOMENTUM: f64 = 0.99;

/// Role of a trainable tensor. Only `Kernel`s are weight-decayed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Kernel,
    Bias,
    Gamma,
    Beta,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Non-trainable BN running statistics.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// All tensors of a network, in declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
    pub stats: Vec<BnStats<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> usize {
        self.params.push(Param {
            name: name.into(),
            kind,
            value,
        });
        self.params.len() - 1
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> usize {
        self.stats.push(BnStats {
            name: name.into(),
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        self.stats.len() - 1
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Record every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect()
    }

    /// Record every parameter as a constant (inference without gradients).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect()
    }

    /// Fold a batch's statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate<T>>) {
        let m = T::of(BN_MOMENTUM);
        let one_m = T::one() - m;
        for u in updates {
            let s = &mut self.stats[u.slot];
            for (r, &b) in s.mean.iter_mut().zip(&u.mean) {
                *r = m * *r + one_m * b;
            }
            for (r, &b) in s.var.iter_mut().zip(&u.var) {
                *r = m * *r + one_m * b;
            }
        }
    }
}

/// Batch statistics observed by one BN layer during a training forward.
pub struct BnUpdate<T> {
    pub slot: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, 't, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub vars: &'a [Var<'t, T>],
    pub stats: &'a [BnStats<T>],
    pub mode: Mode,
    updates: RefCell<Vec<BnUpdate<T>>>,
    trace: Option<RefCell<Vec<String>>>,
}

impl<'a, 't, T: Scalar> Ctx<'a, 't, T> {
    pub fn new(
        tape: &'t Tape<T>,
        vars: &'a [Var<'t, T>],
        store: &'a ParamStore<T>,
        mode: Mode,
    ) -> Self {
        Ctx {
            tape,
            vars,
            stats: &store.stats,
            mode,
            updates: RefCell::new(Vec::new()),
            trace: None,
        }
    }

    /// Also record the name of every layer as it executes.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn var(&self, idx: usize) -> Var<'t, T> {
        self.vars[idx]
    }

    pub fn opt(&self, idx: Option<usize>) -> Option<Var<'t, T>> {
        idx.map(|i| self.vars[i])
    }

    pub(crate) fn record(&self, name: &str) {
        if let Some(t) = &self.trace {
            t.borrow_mut().push(name.to_string());
        }
    }

    pub fn take_trace(&self) -> Vec<String> {
        self.trace.as_ref().map(|t| t.take()).unwrap_or_default()
    }

    pub fn take_updates(&self) -> Vec<BnUpdate<T>> {
        self.updates.take()
    }
}

/// Glorot-uniform kernel of the given shape; fans include the receptive field.
pub fn glorot<T: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of(rng.random_range(-limit..limit)))
        .collect();
    Tensor::new(shape, data).expect("positive extents")
}

/// 2-D convolution layer (optionally grouped).
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub weight: usize,
    pub bias: Option<usize>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let cpg = c_in / groups;
        let rf = kernel * kernel;
        let w = glorot(
            rng,
            &[c_out, cpg, kernel, kernel],
            cpg * rf,
            c_out / groups * rf,
        );
        let weight = store.add(format!("{name}/kernel"), ParamKind::Kernel, w);
        let bias = bias.then(|| {
            store.add(
                format!("{name}/bias"),
                ParamKind::Bias,
                Tensor::zeros(&[c_out]),
            )
        });
        Conv {
            name: name.to_string(),
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            groups,
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        ctx.record(&self.name);
        x.conv2d(
            ctx.var(self.weight),
            ctx.opt(self.bias),
            self.stride,
            Padding::Same,
            self.groups,
        )
    }

    pub fn params(&self) -> usize {
        self.c_out * (self.c_in / self.groups) * self.kernel * self.kernel
            + self.bias.map_or(0, |_| self.c_out)
    }

    /// Multiply-accumulates for one image producing an `h_out × w_out` map.
    pub fn macs(&self, h_out: usize, w_out: usize) -> u64 {
        (h_out * w_out * self.c_out * self.kernel * self.kernel * (self.c_in / self.groups)) as u64
    }
}

/// Batch normalisation with trainable γ/β and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: store.add(
                format!("{name}/gamma"),
                ParamKind::Gamma,
                Tensor::ones(&[channels]),
            ),
            beta: store.add(
                format!("{name}/beta"),
                ParamKind::Beta,
                Tensor::zeros(&[channels]),
            ),
            stats: store.add_stats(name, channels),
            channels,
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        ctx.record(&self.name);
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        let eps = T::of(BN_EPS);
        match ctx.mode {
            Mode::Train => {
                let (y, mean, var) = x.batch_norm_train(g, b, eps)?;
                ctx.updates.borrow_mut().push(BnUpdate {
                    slot: self.stats,
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let s = &ctx.stats[self.stats];
                x.batch_norm_eval(g, b, &s.mean, &s.var, eps)
            }
        }
    }

    pub fn params(&self) -> usize {
        2 * self.channels
    }
}

/// Fully connected layer on `[N, in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub name: String,
    pub weight: usize,
    pub bias: Option<usize>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = glorot(rng, &[d_out, d_in], d_in, d_out);
        let weight = store.add(format!("{name}/kernel"), ParamKind::Kernel, w);
        let bias = bias.then(|| {
            store.add(
                format!("{name}/bias"),
                ParamKind::Bias,
                Tensor::zeros(&[d_out]),
            )
        });
        Dense {
            name: name.to_string(),
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        ctx.record(&self.name);
        x.linear(ctx.var(self.weight), ctx.opt(self.bias))
    }

    pub fn params(&self) -> usize {
        self.d_in * self.d_out + self.bias.map_or(0, |_| self.d_out)
    }

    pub fn macs(&self) -> u64 {
        (self.d_in * self.d_out) as u64
    }
}
