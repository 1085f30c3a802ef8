//! Plain forward/adjoint kernels used by the tape. No autodiff bookkeeping here.

use super::{numel, Scalar, Tensor};
use crate::par;

/// Row-major strides for `shape`, with zero stride on axes where `shape` was broadcast.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Apply `f` elementwise over the broadcast of `a` and `b` into `out_shape`.
pub(crate) fn broadcast_zip<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T + Sync + Send,
) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::from_parts(out_shape.to_vec(), data);
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let n = numel(out_shape);
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        data.push(f(a.data()[oa], b.data()[ob]));
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape.to_vec(), data)
}

/// Sum `grad` (of broadcast shape) back down to `target` shape.
pub(crate) fn reduce_to<T: Scalar>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let out_shape = grad.shape();
    let st = broadcast_strides(target, out_shape);
    let mut acc = vec![T::zero(); numel(target)];
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for &g in grad.data() {
        acc[off] = acc[off] + g;
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= st[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(target.to_vec(), acc)
}

/// `[r, c] x [c, p] -> [r, p]`, optionally transposing either operand in place.
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    r: usize,
    c: usize,
    p: usize,
    a_t: bool,
    b_t: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); r * p];
    par::for_each_chunk(&mut out, p, |i, row| {
        for k in 0..c {
            let av = if a_t { a[k * r + i] } else { a[i * c + k] };
            if av == T::zero() {
                continue;
            }
            if b_t {
                for (j, o) in row.iter_mut().enumerate() {
                    *o = *o + av * b[j * c + k];
                }
            } else {
                let brow = &b[k * p..][..p];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
    });
    out
}

/// Per-(n, c) reduction over the trailing spatial plane of an NCHW tensor.
pub(crate) fn planes<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2..].iter().product())
}

pub(crate) fn global_avg<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let (_, _, hw) = planes(x);
    let inv = T::one() / T::of(hw as f64);
    x.data()
        .chunks(hw)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect()
}

/// Max per plane plus the flat index (into `x`) of the first maximal element.
pub(crate) fn global_max<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<usize>) {
    let (_, _, hw) = planes(x);
    x.data()
        .chunks(hw)
        .enumerate()
        .map(|(pi, p)| {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            (p[best], pi * hw + best)
        })
        .unzip()
}

/// Non-overlapping `win x win` pooling; returns values and, for max, argmax flat indices.
pub(crate) fn window_pool<T: Scalar>(
    x: &Tensor<T>,
    win: usize,
    max: bool,
) -> (Tensor<T>, Vec<usize>) {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / win, w / win);
    let mut vals = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::new();
    let inv = T::one() / T::of((win * win) as f64);
    for pl in 0..n * c {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + oy * win * w + ox * win;
                let mut acc = T::zero();
                for dy in 0..win {
                    for dx in 0..win {
                        let i = base + (oy * win + dy) * w + ox * win + dx;
                        let v = x.data()[i];
                        acc = acc + v;
                        if v > x.data()[best_i] {
                            best_i = i;
                        }
                    }
                }
                if max {
                    vals.push(x.data()[best_i]);
                    arg.push(best_i);
                } else {
                    vals.push(acc * inv);
                }
            }
        }
    }
    (Tensor::from_parts(vec![n, c, oh, ow], vals), arg)
}

/// Mean (or max, with argmax) across the channel axis of NCHW -> `[N,1,H,W]`.
pub(crate) fn channel_reduce<T: Scalar>(x: &Tensor<T>, max: bool) -> (Tensor<T>, Vec<usize>) {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let hw: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(n * hw);
    let mut arg = Vec::new();
    let inv = T::one() / T::of(c as f64);
    for b in 0..n {
        for p in 0..hw {
            let first = b * c * hw + p;
            if max {
                let mut best = first;
                for ch in 1..c {
                    let i = first + ch * hw;
                    if x.data()[i] > x.data()[best] {
                        best = i;
                    }
                }
                out.push(x.data()[best]);
                arg.push(best);
            } else {
                let sum: T = (0..c).map(|ch| x.data()[first + ch * hw]).sum();
                out.push(sum * inv);
            }
        }
    }
    let mut shape = s.to_vec();
    shape[1] = 1;
    (Tensor::from_parts(shape, out), arg)
}

/// Softmax along `axis` with max subtraction.
pub(crate) fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let s = x.shape();
    let len = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let outer: usize = s[..axis].iter().product();
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let m = (0..len).map(|k| out[at(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..len {
                let e = (out[at(k)] - m).exp();
                out[at(k)] = e;
                z = z + e;
            }
            for k in 0..len {
                out[at(k)] = out[at(k)] / z;
            }
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let s = y.shape();
    let len = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let outer: usize = s[..axis].iter().product();
    let mut gx = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let dot: T = (0..len).map(|k| y.data()[at(k)] * g.data()[at(k)]).sum();
            for k in 0..len {
                gx[at(k)] = y.data()[at(k)] * (g.data()[at(k)] - dot);
            }
        }
    }
    Tensor::from_parts(s.to_vec(), gx)
}

/// Per-channel batch statistics of an `[N, C, ...]` tensor: (mean, biased variance).
pub(crate) fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, hw) = planes(x);
    let m = T::of((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s = s + x.data()[(b * c + ch) * hw..][..hw]
                .iter()
                .copied()
                .sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for b in 0..n {
            for &e in &x.data()[(b * c + ch) * hw..][..hw] {
                v = v + (e - mu) * (e - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel; also returns `xhat`.
pub(crate) fn channel_affine<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let (_, c, hw) = planes(x);
    let mut xhat = x.data().to_vec();
    let mut y = x.data().to_vec();
    for (pl, (hx, yy)) in xhat.chunks_mut(hw).zip(y.chunks_mut(hw)).enumerate() {
        let ch = pl % c;
        for (h, o) in hx.iter_mut().zip(yy.iter_mut()) {
            *h = (*h - mean[ch]) * inv_std[ch];
            *o = gamma[ch] * *h + beta[ch];
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), y),
        Tensor::from_parts(x.shape().to_vec(), xhat),
    )
}

/// Per-channel sums of `g` and `g * xhat`.
pub(crate) fn channel_grad_sums<T: Scalar>(g: &Tensor<T>, xhat: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (_, c, hw) = planes(g);
    let mut sg = vec![T::zero(); c];
    let mut sgx = vec![T::zero(); c];
    for (pl, (gp, hp)) in g.data().chunks(hw).zip(xhat.data().chunks(hw)).enumerate() {
        let ch = pl % c;
        for (&a, &b) in gp.iter().zip(hp) {
            sg[ch] = sg[ch] + a;
            sgx[ch] = sgx[ch] + a * b;
        }
    }
    (sg, sgx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_then_reduce_round_trip() {
        let a = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[3], &[10., 20., 30.]).unwrap();
        let c = broadcast_zip(&a, &b, &[2, 3], |x, y| x + y);
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        let r = reduce_to(&c, &[3]);
        assert_eq!(r.data(), &[25., 47., 69.]);
        let col = Tensor::<f64>::from_f64(&[2, 1], &[1., 2.]).unwrap();
        let d = broadcast_zip(&a, &col, &[2, 3], |x, y| x * y);
        assert_eq!(d.data(), &[1., 2., 3., 8., 10., 12.]);
        assert_eq!(reduce_to(&d, &[2, 1]).data(), &[6., 30.]);
    }

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1., 2., 3., 4.];
        let b = [5., 6., 7., 8.];
        assert_eq!(
            matmul(&a, &b, 2, 2, 2, false, false),
            vec![19., 22., 43., 50.]
        );
        assert_eq!(
            matmul(&a, &b, 2, 2, 2, true, false),
            vec![26., 30., 38., 44.]
        );
        assert_eq!(
            matmul(&a, &b, 2, 2, 2, false, true),
            vec![17., 23., 39., 53.]
        );
    }

    #[test]
    fn max_pool_prefers_first_on_ties() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[3., 3., 3., 3.]).unwrap();
        let (_, arg) = global_max(&x);
        assert_eq!(arg, vec![0]);
        let (_, arg) = window_pool(&x, 2, true);
        assert_eq!(arg, vec![0]);
    }
}
