//! Seeded five-class geometric image generator, used for smoke training and
//! the CLI tests.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{encode_ppm, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 5] = ["checker", "disc", "h_stripes", "ring", "v_stripes"];

/// Pixel noise standard deviation on the 0–255 scale.
pub const NOISE_STD: f32 = 24.0;

fn colour(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    [0, 1, 2].map(|_| rng.random_range(lo..hi))
}

/// One `[3, size, size]` image of `class` with values in 0–255.
pub fn render(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    // Dark background, bright foreground, so class identity is carried by
    // geometry rather than colour.
    let bg = colour(rng, 0.0, 90.0);
    let fg = colour(rng, 150.0, 255.0);
    let s = size as f32;
    let period = rng.random_range(s / 8.0..s / 4.0).max(2.0);
    let phase = rng.random_range(0.0..period);
    let cx = rng.random_range(0.35..0.65) * s;
    let cy = rng.random_range(0.35..0.65) * s;
    let radius = rng.random_range(0.2..0.32) * s;
    let band = |v: f32| ((v + phase) / period).floor() as i64 % 2 == 0;
    let noise = Normal::new(0.0, NOISE_STD).expect("finite std");
    let plane = size * size;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let r = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
            let on = match class {
                0 => band(fx) ^ band(fy),
                1 => r < radius,
                2 => band(fy),
                3 => (r - radius).abs() < 0.08 * s,
                _ => band(fx),
            };
            let base = if on { fg } else { bg };
            for c in 0..3 {
                let v = base[c] + noise.sample(rng);
                data[c * plane + y * size + x] = v.round().clamp(0.0, 255.0);
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("shape matches buffer")
}

fn samples(
    n_per_class: usize,
    size: usize,
    seed: u64,
) -> impl Iterator<Item = (usize, usize, Tensor<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Interleave classes so any prefix is balanced.
    (0..n_per_class * CLASS_NAMES.len()).map(move |i| {
        let class = i % CLASS_NAMES.len();
        (i / CLASS_NAMES.len(), class, render(class, size, &mut rng))
    })
}

/// Prepared dataset (values in `[0, 1]`) of `n_per_class` images per class.
pub fn synthetic_dataset(n_per_class: usize, size: usize, seed: u64) -> LabeledDataset {
    let names = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    let mut ds = LabeledDataset::new([3, size, size], names);
    for (_, class, img) in samples(n_per_class, size, seed) {
        ds.push(&img.map(|v| v / 255.0), class, None)
            .expect("generated images match the dataset shape");
    }
    ds
}

/// Write the same images as [`synthetic_dataset`] as `root/<class>/NNNN.ppm`.
pub fn write_synthetic_tree(root: &Path, n_per_class: usize, size: usize, seed: u64) -> Result<()> {
    for name in CLASS_NAMES {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|source| Error::Path { path: dir, source })?;
    }
    for (i, class, img) in samples(n_per_class, size, seed) {
        let path = root.join(CLASS_NAMES[class]).join(format!("{i:04}.ppm"));
        std::fs::write(&path, encode_ppm(&img)?).map_err(|source| Error::Path { path, source })?;
    }
    Ok(())
}
