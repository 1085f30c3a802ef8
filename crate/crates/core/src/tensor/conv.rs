//! 2-D cross-correlation kernels (NCHW activations, OIHW weights).

use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{config, mismatch, Result};
use crate::par;

/// Spatial padding policy.
///
/// `Same` zero-pads so that `out = ceil(in / stride)`; when the total padding
/// is odd the extra row/column goes to the bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub groups: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent and leading pad along one axis.
pub fn out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (input >= kernel).then(|| ((input - kernel) / stride + 1, 0)),
    }
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: Padding,
        groups: usize,
    ) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(mismatch("conv2d", x_shape, w_shape));
        }
        let (n, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, cpg, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if stride == 0 || groups == 0 {
            return Err(config("conv2d stride and groups must be positive"));
        }
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(config(format!(
                "conv2d: channels in={c_in} out={c_out} not divisible by groups={groups}"
            )));
        }
        if cpg != c_in / groups {
            return Err(config(format!(
                "conv2d: weight expects {cpg} input channels per group, input provides {}",
                c_in / groups
            )));
        }
        let (out_h, pad_top) = out_extent(h, kh, stride, padding).ok_or_else(|| {
            config(format!(
                "conv2d: kernel {kh}x{kw} larger than input {h}x{w}"
            ))
        })?;
        let (out_w, pad_left) = out_extent(w, kw, stride, padding).ok_or_else(|| {
            config(format!(
                "conv2d: kernel {kh}x{kw} larger than input {h}x{w}"
            ))
        })?;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            groups,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.out_h, self.out_w]
    }

    fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Range of output columns whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        valid_range(self.out_w, self.w, kx, self.pad_left, self.stride)
    }

    /// Input row hit by output row `oy` and tap `ky`, if inside the image.
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.pad_top)
            .filter(|&r| r < self.h)
    }
}

fn valid_range(out: usize, input: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    // ix = ox*stride + k - pad must lie in [0, input)
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let in_plane = g.h * g.w;
    let cpg = g.cin_per_group();
    let opg = g.cout_per_group();
    let ksz = g.kh * g.kw;
    let mut out = vec![T::zero(); g.n * g.c_out * plane];
    par::for_each_chunk(&mut out, plane, |idx, dst| {
        let (n, co) = (idx / g.c_out, idx % g.c_out);
        let grp = co / opg;
        for cl in 0..cpg {
            let ci = grp * cpg + cl;
            let src = &x[(n * g.c_in + ci) * in_plane..][..in_plane];
            let wk = &w[(co * cpg + cl) * ksz..][..ksz];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    let (lo, hi) = g.valid_cols(kx);
                    for oy in 0..g.out_h {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row = &src[iy * g.w..][..g.w];
                        let drow = &mut dst[oy * g.out_w..][..g.out_w];
                        for ox in lo..hi {
                            let ix = ox * g.stride + kx - g.pad_left;
                            drow[ox] = drow[ox] + wv * row[ix];
                        }
                    }
                }
            }
        }
        if let Some(b) = b {
            let bv = b[co];
            dst.iter_mut().for_each(|v| *v = *v + bv);
        }
    });
    out
}

pub(crate) fn conv2d_backward_input<T: Scalar>(g: &ConvGeom, gout: &[T], w: &[T]) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let in_plane = g.h * g.w;
    let cpg = g.cin_per_group();
    let opg = g.cout_per_group();
    let ksz = g.kh * g.kw;
    let mut gx = vec![T::zero(); g.n * g.c_in * in_plane];
    par::for_each_chunk(&mut gx, in_plane, |idx, dst| {
        let (n, ci) = (idx / g.c_in, idx % g.c_in);
        let grp = ci / cpg;
        let cl = ci % cpg;
        for co in grp * opg..(grp + 1) * opg {
            let go = &gout[(n * g.c_out + co) * plane..][..plane];
            let wk = &w[(co * cpg + cl) * ksz..][..ksz];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    let (lo, hi) = g.valid_cols(kx);
                    for oy in 0..g.out_h {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let grow = &go[oy * g.out_w..][..g.out_w];
                        let drow = &mut dst[iy * g.w..][..g.w];
                        for ox in lo..hi {
                            let ix = ox * g.stride + kx - g.pad_left;
                            drow[ix] = drow[ix] + wv * grow[ox];
                        }
                    }
                }
            }
        }
    });
    gx
}

pub(crate) fn conv2d_backward_weight<T: Scalar>(g: &ConvGeom, gout: &[T], x: &[T]) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    let in_plane = g.h * g.w;
    let cpg = g.cin_per_group();
    let opg = g.cout_per_group();
    let ksz = g.kh * g.kw;
    let mut gw = vec![T::zero(); g.c_out * cpg * ksz];
    par::for_each_chunk(&mut gw, cpg * ksz, |co, dst| {
        let grp = co / opg;
        for n in 0..g.n {
            let go = &gout[(n * g.c_out + co) * plane..][..plane];
            for cl in 0..cpg {
                let ci = grp * cpg + cl;
                let src = &x[(n * g.c_in + ci) * in_plane..][..in_plane];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let (lo, hi) = g.valid_cols(kx);
                        let mut acc = T::zero();
                        for oy in 0..g.out_h {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let row = &src[iy * g.w..][..g.w];
                            let grow = &go[oy * g.out_w..][..g.out_w];
                            for ox in lo..hi {
                                acc = acc + grow[ox] * row[ox * g.stride + kx - g.pad_left];
                            }
                        }
                        let slot = &mut dst[cl * ksz + ky * g.kw + kx];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    });
    gw
}

pub(crate) fn conv2d_backward_bias<T: Scalar>(g: &ConvGeom, gout: &[T]) -> Vec<T> {
    let plane = g.out_h * g.out_w;
    (0..g.c_out)
        .map(|co| {
            (0..g.n)
                .map(|n| {
                    gout[(n * g.c_out + co) * plane..][..plane]
                        .iter()
                        .copied()
                        .sum::<T>()
                })
                .sum()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_puts_extra_on_bottom_right() {
        // 4 wide, kernel 3, stride 2 -> out 2, total pad 1, leading 0
        assert_eq!(out_extent(4, 3, 2, Padding::Same), Some((2, 0)));
        assert_eq!(out_extent(5, 3, 1, Padding::Same), Some((5, 1)));
        assert_eq!(out_extent(224, 3, 2, Padding::Same), Some((112, 0)));
        assert_eq!(out_extent(7, 7, 1, Padding::Same), Some((7, 3)));
        assert_eq!(out_extent(2, 3, 1, Padding::Valid), None);
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for input in 1usize..9 {
            for k in 1..6 {
                for stride in 1..4 {
                    for pad in 0..4 {
                        let out = (input + 2 * pad).saturating_sub(k) / stride + 1;
                        for kx in 0..k {
                            let (lo, hi) = valid_range(out, input, kx, pad, stride);
                            let brute: Vec<usize> = (0..out)
                                .filter(|&ox| {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    ix >= 0 && (ix as usize) < input
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, brute, "in={input} k={k} s={stride} p={pad} kx={kx}");
                        }
                    }
                }
            }
        }
    }
}
