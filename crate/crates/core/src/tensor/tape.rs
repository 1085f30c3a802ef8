//! Reverse-mode autodiff tape.
//!
//! Every differentiable call appends one node holding its output value and
//! whatever the adjoint needs. [`Tape::backward`] walks the nodes in reverse,
//! applying each adjoint once and accumulating additively into inputs that
//! feed several consumers.

use std::cell::RefCell;
use std::rc::Rc;

use super::conv::{self, ConvGeom, Padding};
use super::kernels as k;
use super::{broadcast_shapes, Scalar, Tensor};
use crate::error::{mismatch, Error, Result};

type Id = usize;

enum Op<T> {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, T),
    MatMul(Id, Id),
    Linear {
        x: Id,
        w: Id,
        b: Option<Id>,
    },
    Conv {
        x: Id,
        w: Id,
        b: Option<Id>,
        geom: ConvGeom,
    },
    GlobalAvg(Id),
    GlobalMax {
        x: Id,
        arg: Vec<usize>,
    },
    AvgPool {
        x: Id,
        win: usize,
    },
    MaxPool {
        x: Id,
        arg: Vec<usize>,
    },
    ChannelMean(Id),
    ChannelMax {
        x: Id,
        arg: Vec<usize>,
    },
    Concat {
        parts: Vec<Id>,
        axis: usize,
    },
    BatchNorm {
        x: Id,
        gamma: Id,
        beta: Id,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Id),
    Sigmoid(Id),
    Softmax {
        x: Id,
        axis: usize,
    },
    Reshape(Id),
    Sum(Id),
    SumSquares(Id),
    CrossEntropy {
        p: Id,
        targets: Tensor<T>,
    },
    Cosine {
        x: Id,
        targets: Tensor<T>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
    leaf_grad: bool,
}

/// Record of executed operations for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: Id,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` requires grad.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable input: gradients will be reported for it.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true, true)
    }

    /// A constant input: no gradient is tracked.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool, leaf_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
            leaf_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: Id) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[Id]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Back-propagate from a scalar `loss`.
    ///
    /// Every variable created with [`Tape::leaf`] receives a fully populated
    /// gradient (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            for (input, contrib) in adjoint(&nodes, node, &g) {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contrib.data())
                        .for_each(|(a, &c)| *a = *a + c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            if node.leaf_grad {
                grads[id] = Some(g);
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if node.leaf_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

fn adjoint<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Vec<(Id, Tensor<T>)> {
    let val = |i: Id| &*nodes[i].value;
    let out = &*node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, k::reduce_to(g, val(*a).shape())),
            (*b, k::reduce_to(g, val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, k::reduce_to(g, val(*a).shape())),
            (*b, k::reduce_to(&g.map(|v| -v), val(*b).shape())),
        ],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = k::broadcast_zip(g, vb, g.shape(), |x, y| x * y);
            let gb = k::broadcast_zip(g, va, g.shape(), |x, y| x * y);
            vec![
                (*a, k::reduce_to(&ga, va.shape())),
                (*b, k::reduce_to(&gb, vb.shape())),
            ]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|v| v * *c))],
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (r, c, p) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let ga = k::matmul(g.data(), vb.data(), r, p, c, false, true);
            let gb = k::matmul(va.data(), g.data(), c, r, p, true, false);
            vec![
                (*a, Tensor::from_parts(vec![r, c], ga)),
                (*b, Tensor::from_parts(vec![c, p], gb)),
            ]
        }
        Op::Linear { x, w, b } => {
            let (vx, vw) = (val(*x), val(*w));
            let (n, i, o) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
            let gx = k::matmul(g.data(), vw.data(), n, o, i, false, false);
            let gw = k::matmul(g.data(), vx.data(), o, n, i, true, false);
            let mut res = vec![
                (*x, Tensor::from_parts(vec![n, i], gx)),
                (*w, Tensor::from_parts(vec![o, i], gw)),
            ];
            if let Some(b) = b {
                res.push((*b, k::reduce_to(g, &[o])));
            }
            res
        }
        Op::Conv { x, w, b, geom } => {
            let mut res = Vec::with_capacity(3);
            if nodes[*x].needs_grad {
                let gx = conv::conv2d_backward_input(geom, g.data(), val(*w).data());
                res.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), gx)));
            }
            if nodes[*w].needs_grad {
                let gw = conv::conv2d_backward_weight(geom, g.data(), val(*x).data());
                res.push((*w, Tensor::from_parts(val(*w).shape().to_vec(), gw)));
            }
            if let Some(b) = b {
                res.push((
                    *b,
                    Tensor::from_parts(
                        vec![geom.c_out],
                        conv::conv2d_backward_bias(geom, g.data()),
                    ),
                ));
            }
            res
        }
        Op::GlobalAvg(x) => {
            let vx = val(*x);
            let (_, _, hw) = k::planes(vx);
            let inv = T::one() / T::of(hw as f64);
            let mut gx = Vec::with_capacity(vx.numel());
            for &gv in g.data() {
                gx.extend(std::iter::repeat_n(gv * inv, hw));
            }
            vec![(*x, Tensor::from_parts(vx.shape().to_vec(), gx))]
        }
        Op::GlobalMax { x, arg } | Op::MaxPool { x, arg } | Op::ChannelMax { x, arg } => {
            let mut gx = Tensor::zeros(val(*x).shape());
            for (&i, &gv) in arg.iter().zip(g.data()) {
                gx.data_mut()[i] = gx.data_mut()[i] + gv;
            }
            vec![(*x, gx)]
        }
        Op::AvgPool { x, win } => {
            let vx = val(*x);
            let s = vx.shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h / win, w / win);
            let inv = T::one() / T::of((win * win) as f64);
            let mut gx = Tensor::zeros(s);
            for pl in 0..s[0] * s[1] {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g.data()[(pl * oh + oy) * ow + ox] * inv;
                        for dy in 0..*win {
                            for dx in 0..*win {
                                gx.data_mut()[pl * h * w + (oy * win + dy) * w + ox * win + dx] =
                                    gv;
                            }
                        }
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::ChannelMean(x) => {
            let vx = val(*x);
            let s = vx.shape();
            let (n, c) = (s[0], s[1]);
            let hw: usize = s[2..].iter().product();
            let inv = T::one() / T::of(c as f64);
            let mut gx = Vec::with_capacity(vx.numel());
            for b in 0..n {
                for _ in 0..c {
                    gx.extend(g.data()[b * hw..][..hw].iter().map(|&v| v * inv));
                }
            }
            vec![(*x, Tensor::from_parts(s.to_vec(), gx))]
        }
        Op::Concat { parts, axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let total = out.shape()[*axis];
            let mut res = Vec::with_capacity(parts.len());
            let mut start = 0;
            for &p in parts {
                let vp = val(p);
                let len = vp.shape()[*axis];
                let mut gp = Vec::with_capacity(vp.numel());
                for o in 0..outer {
                    gp.extend_from_slice(&g.data()[(o * total + start) * inner..][..len * inner]);
                }
                res.push((p, Tensor::from_parts(vp.shape().to_vec(), gp)));
                start += len;
            }
            res
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let (sg, sgx) = k::channel_grad_sums(g, xhat);
            let gam = val(*gamma).data();
            let (n, c, hw) = k::planes(g);
            let m = T::of((n * hw) as f64);
            let mut gx = g.data().to_vec();
            for (pl, chunk) in gx.chunks_mut(hw).enumerate() {
                let ch = pl % c;
                let hx = &xhat.data()[pl * hw..][..hw];
                for (v, &h) in chunk.iter_mut().zip(hx) {
                    *v = if *train {
                        gam[ch] * inv_std[ch] * (*v - sg[ch] / m - h * sgx[ch] / m)
                    } else {
                        *v * gam[ch] * inv_std[ch]
                    };
                }
            }
            vec![
                (*x, Tensor::from_parts(g.shape().to_vec(), gx)),
                (*gamma, Tensor::from_parts(vec![c], sgx)),
                (*beta, Tensor::from_parts(vec![c], sg)),
            ]
        }
        Op::Relu(x) => {
            let vx = val(*x);
            let gx =
                vx.data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() });
            vec![(*x, Tensor::from_parts(vx.shape().to_vec(), gx.collect()))]
        }
        Op::Sigmoid(x) => {
            let gx = out
                .data()
                .iter()
                .zip(g.data())
                .map(|(&y, &gv)| gv * y * (T::one() - y));
            vec![(*x, Tensor::from_parts(out.shape().to_vec(), gx.collect()))]
        }
        Op::Softmax { x, axis } => vec![(*x, k::softmax_backward(out, g, *axis))],
        Op::Reshape(x) => vec![(
            *x,
            Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec()),
        )],
        Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
        Op::SumSquares(x) => {
            let two = T::of(2.0) * g.data()[0];
            vec![(*x, val(*x).map(|v| two * v))]
        }
        Op::CrossEntropy { p, targets } => {
            let vp = val(*p);
            let n = T::of(vp.shape()[0] as f64);
            let lo = T::of(CE_CLAMP);
            let scale = g.data()[0] / n;
            let gp = vp.data().iter().zip(targets.data()).map(|(&pv, &t)| {
                if t == T::zero() || pv < lo || pv > T::one() {
                    T::zero()
                } else {
                    -scale * t / pv
                }
            });
            vec![(*p, Tensor::from_parts(vp.shape().to_vec(), gp.collect()))]
        }
        Op::Cosine { x, targets } => {
            let vx = val(*x);
            let (rows, cols) = (vx.shape()[0], vx.shape()[1]);
            let scale = g.data()[0] / T::of(rows as f64);
            let eps = T::of(COSINE_EPS);
            let mut gx = vec![T::zero(); vx.numel()];
            for r in 0..rows {
                let xr = &vx.data()[r * cols..][..cols];
                let tr = &targets.data()[r * cols..][..cols];
                let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                let tnorm = tr.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm == T::zero() || tnorm == T::zero() {
                    continue;
                }
                let dot: T = xr.iter().zip(tr).map(|(&a, &b)| a * b).sum::<T>() / tnorm;
                let d = norm + eps;
                for c in 0..cols {
                    let dcos = tr[c] / tnorm / d - dot * xr[c] / (norm * d * d);
                    gx[r * cols + c] = -scale * dcos;
                }
            }
            vec![(*x, Tensor::from_parts(vx.shape().to_vec(), gx))]
        }
    }
}

/// Lower clamp applied to probabilities inside the cross-entropy log.
pub(crate) const CE_CLAMP: f64 = 1e-12;
/// Guard added to row norms in the cosine loss.
pub(crate) const COSINE_EPS: f64 = 1e-12;

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, op, needs, false)
    }

    fn binary_broadcast(
        &self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T + Sync + Send,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shapes(a.shape(), b.shape())
            .ok_or_else(|| mismatch(name, a.shape(), b.shape()))?;
        let out = k::broadcast_zip(&a, &b, &shape, f);
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(out, op, needs, false))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_broadcast(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_broadcast(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_broadcast(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        self.unary(self.value().map(|v| v * c), Op::Scale(self.id, c))
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(mismatch("matmul", a.shape(), b.shape()));
        }
        let (r, c, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = k::matmul(a.data(), b.data(), r, c, p, false, false);
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(
            Tensor::from_parts(vec![r, p], out),
            Op::MatMul(self.id, other.id),
            needs,
            false,
        ))
    }

    /// `x·wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        if x.rank() != 2 || wv.rank() != 2 || x.shape()[1] != wv.shape()[1] {
            return Err(mismatch("linear", x.shape(), wv.shape()));
        }
        let (n, i, o) = (x.shape()[0], x.shape()[1], wv.shape()[0]);
        let mut out = k::matmul(x.data(), wv.data(), n, i, o, false, true);
        let mut ids = vec![self.id, w.id];
        if let Some(b) = b {
            let bv = b.value();
            if bv.shape() != [o] {
                return Err(mismatch("linear bias", bv.shape(), &[o]));
            }
            for row in out.chunks_mut(o) {
                row.iter_mut()
                    .zip(bv.data())
                    .for_each(|(r, &bb)| *r = *r + bb);
            }
            ids.push(b.id);
        }
        let needs = self.tape.needs(&ids);
        let op = Op::Linear {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
        };
        Ok(self
            .tape
            .push(Tensor::from_parts(vec![n, o], out), op, needs, false))
    }

    /// Cross-correlation; `w: [C_out, C_in/groups, kh, kw]`, `b: [C_out]`.
    pub fn conv2d(
        &self,
        w: Var<'t, T>,
        b: Option<Var<'t, T>>,
        stride: usize,
        padding: Padding,
        groups: usize,
    ) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let geom = ConvGeom::new(x.shape(), wv.shape(), stride, padding, groups)?;
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [geom.c_out] {
                return Err(mismatch("conv2d bias", bv.shape(), &[geom.c_out]));
            }
        }
        let out = conv::conv2d_forward(&geom, x.data(), wv.data(), bv.as_ref().map(|t| t.data()));
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let needs = self.tape.needs(&ids);
        let op = Op::Conv {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
            geom,
        };
        Ok(self.tape.push(
            Tensor::from_parts(geom.out_shape().to_vec(), out),
            op,
            needs,
            false,
        ))
    }

    /// Depthwise convolution: `groups = C_in = C_out`, `w: [C, 1, kh, kw]`.
    pub fn depthwise_conv2d(
        &self,
        w: Var<'t, T>,
        b: Option<Var<'t, T>>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var<'t, T>> {
        let c = self.require_rank(4, "depthwise_conv2d")?[1];
        let ws = w.shape();
        if ws.len() != 4 || ws[0] != c || ws[1] != 1 {
            return Err(crate::error::config(format!(
                "depthwise_conv2d: weight {ws:?} does not match {c} channels"
            )));
        }
        self.conv2d(w, b, stride, padding, c)
    }

    fn require_rank(&self, rank: usize, op: &'static str) -> Result<Vec<usize>> {
        let s = self.shape();
        if s.len() != rank {
            return Err(Error::Contract(format!(
                "{op} expects rank {rank}, got {s:?}"
            )));
        }
        Ok(s)
    }

    /// `[N, C, H, W] -> [N, C, 1, 1]` mean.
    pub fn global_avg_pool(&self) -> Result<Var<'t, T>> {
        let s = self.require_rank(4, "global_avg_pool")?;
        let x = self.value();
        let out = Tensor::from_parts(vec![s[0], s[1], 1, 1], k::global_avg(&x));
        Ok(self.unary(out, Op::GlobalAvg(self.id)))
    }

    /// `[N, C, H, W] -> [N, C, 1, 1]` max; gradient goes to the first maximal element.
    pub fn global_max_pool(&self) -> Result<Var<'t, T>> {
        let s = self.require_rank(4, "global_max_pool")?;
        let x = self.value();
        let (vals, arg) = k::global_max(&x);
        let out = Tensor::from_parts(vec![s[0], s[1], 1, 1], vals);
        Ok(self.unary(out, Op::GlobalMax { x: self.id, arg }))
    }

    fn check_window(&self, win: usize, op: &'static str) -> Result<()> {
        let s = self.require_rank(4, op)?;
        if win == 0 || win > s[2] || win > s[3] {
            return Err(crate::error::config(format!(
                "{op}: window {win} exceeds spatial extent {}x{}",
                s[2], s[3]
            )));
        }
        Ok(())
    }

    /// Non-overlapping average pooling with a square window (stride = window).
    pub fn avg_pool(&self, win: usize) -> Result<Var<'t, T>> {
        self.check_window(win, "avg_pool")?;
        let (out, _) = k::window_pool(&self.value(), win, false);
        Ok(self.unary(out, Op::AvgPool { x: self.id, win }))
    }

    /// Non-overlapping max pooling with a square window (stride = window).
    pub fn max_pool(&self, win: usize) -> Result<Var<'t, T>> {
        self.check_window(win, "max_pool")?;
        let (out, arg) = k::window_pool(&self.value(), win, true);
        Ok(self.unary(out, Op::MaxPool { x: self.id, arg }))
    }

    /// Mean over the channel axis, `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_mean(&self) -> Result<Var<'t, T>> {
        self.require_rank(4, "channel_mean")?;
        let (out, _) = k::channel_reduce(&self.value(), false);
        Ok(self.unary(out, Op::ChannelMean(self.id)))
    }

    /// Max over the channel axis, `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_max(&self) -> Result<Var<'t, T>> {
        self.require_rank(4, "channel_max")?;
        let (out, arg) = k::channel_reduce(&self.value(), true);
        Ok(self.unary(out, Op::ChannelMax { x: self.id, arg }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let tape = first.tape;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            let same = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..][..len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<Id> = parts.iter().map(|p| p.id).collect();
        let needs = tape.needs(&ids);
        Ok(tape.push(
            Tensor::from_parts(shape, data),
            Op::Concat { parts: ids, axis },
            needs,
            false,
        ))
    }

    fn check_bn_params(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>) -> Result<usize> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::Contract(format!(
                "batch_norm expects [N, C, ...], got {s:?}"
            )));
        }
        let c = s[1];
        for p in [gamma, beta] {
            if p.shape() != [c] {
                return Err(crate::error::config(format!(
                    "batch_norm: parameter shape {:?} does not match {c} channels",
                    p.shape()
                )));
            }
        }
        Ok(c)
    }

    /// Normalise with batch statistics. Returns the output and the batch (mean, variance).
    pub fn batch_norm_train(
        &self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: T,
    ) -> Result<(Var<'t, T>, Vec<T>, Vec<T>)> {
        self.check_bn_params(&gamma, &beta)?;
        let x = self.value();
        if x.shape()[0] == 0 {
            return Err(Error::InvalidInput(
                "batch_norm: empty batch in training mode".into(),
            ));
        }
        let (mean, var) = k::channel_moments(&x);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = k::channel_affine(
            &x,
            &mean,
            &inv_std,
            gamma.value().data(),
            beta.value().data(),
        );
        let needs = self.tape.needs(&[self.id, gamma.id, beta.id]);
        let op = Op::BatchNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            train: true,
        };
        Ok((self.tape.push(y, op, needs, false), mean, var))
    }

    /// Normalise with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var<'t, T>> {
        let c = self.check_bn_params(&gamma, &beta)?;
        if mean.len() != c || var.len() != c {
            return Err(mismatch(
                "batch_norm running stats",
                &[mean.len(), var.len()],
                &[c, c],
            ));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = k::channel_affine(
            &self.value(),
            mean,
            &inv_std,
            gamma.value().data(),
            beta.value().data(),
        );
        let needs = self.tape.needs(&[self.id, gamma.id, beta.id]);
        let op = Op::BatchNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            train: false,
        };
        Ok(self.tape.push(y, op, needs, false))
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(self.value().map(|v| v.max(T::zero())), Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let out = self.value().map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        self.unary(out, Op::Sigmoid(self.id))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for {s:?}"
            )));
        }
        let out = k::softmax(&self.value(), axis);
        Ok(self.unary(out, Op::Softmax { x: self.id, axis }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::of(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Σ x², used by the kernel regulariser.
    pub fn sum_squares(&self) -> Var<'t, T> {
        let s = self.value().sum_squares();
        self.unary(Tensor::scalar(s), Op::SumSquares(self.id))
    }

    /// Mean over rows of `-Σ_c t_c · log(clamp(p_c, 1e-12, 1))`.
    pub fn cross_entropy(&self, targets: &Tensor<T>) -> Result<Var<'t, T>> {
        let p = self.value();
        if p.rank() != 2 || p.shape() != targets.shape() {
            return Err(mismatch("cross_entropy", p.shape(), targets.shape()));
        }
        let lo = T::of(CE_CLAMP);
        let total: T = p
            .data()
            .iter()
            .zip(targets.data())
            .filter(|(_, &t)| t != T::zero())
            .map(|(&pv, &t)| -t * pv.max(lo).min(T::one()).ln())
            .sum();
        let loss = total / T::of(p.shape()[0] as f64);
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                p: self.id,
                targets: targets.clone(),
            },
        ))
    }

    /// Mean over rows of `1 - <x/(‖x‖+ε), t/‖t‖>`.
    pub fn cosine_loss(&self, targets: &Tensor<T>) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || x.shape() != targets.shape() {
            return Err(mismatch("cosine_loss", x.shape(), targets.shape()));
        }
        let cols = x.shape()[1];
        let eps = T::of(COSINE_EPS);
        let mut total = T::zero();
        for (xr, tr) in x.data().chunks(cols).zip(targets.data().chunks(cols)) {
            let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
            let tnorm = tr.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                log::warn!("cosine_loss: zero-norm embedding row guarded by epsilon");
            }
            let cos = if tnorm == T::zero() {
                T::zero()
            } else {
                xr.iter().zip(tr).map(|(&a, &b)| a * b).sum::<T>() / tnorm / (norm + eps)
            };
            total = total + (T::one() - cos);
        }
        let loss = total / T::of(x.shape()[0] as f64);
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::Cosine {
                x: self.id,
                targets: targets.clone(),
            },
        ))
    }
}
