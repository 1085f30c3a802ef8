//! Resizing and normalisation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Network input side.
pub const INPUT_SIZE: usize = 224;

/// Bilinear resize of `[C, H, W]` with half-pixel centres (corners not aligned).
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::Contract(format!(
            "resize expects [C, H, W] and a positive size, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &img.data()[ch * h * w..][..h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Resize a decoded RGB image to `size × size` and scale to `[0, 1]`.
pub fn prepare(img: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Contract(format!(
            "prepare expects a 3-channel image, got {s:?}"
        )));
    }
    Ok(resize_bilinear(img, size, size)?.map(|v| (v / 255.0).clamp(0.0, 1.0)))
}
