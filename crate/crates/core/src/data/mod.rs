//! Image ingestion, preparation, splitting and batching.

mod decode;
mod load;
mod prepare;
mod split;
pub mod synthetic;

use std::path::PathBuf;

pub use decode::{decode_image, decode_png, decode_ppm, encode_ppm, ImageFormat};
pub use load::{load_directory, load_manifest, LoadReport};
pub use prepare::{prepare, resize_bilinear, INPUT_SIZE};
pub use split::{split, SplitMode, SplitSpec, Splits};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Prepared images `[C, H, W]` stored back to back, with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub image_shape: [usize; 3],
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Source file per sample (empty for generated data).
    pub paths: Vec<PathBuf>,
}

impl LabeledDataset {
    pub fn new(image_shape: [usize; 3], class_names: Vec<String>) -> Self {
        LabeledDataset {
            image_shape,
            data: Vec::new(),
            labels: Vec::new(),
            class_names,
            paths: Vec::new(),
        }
    }

    pub fn push(&mut self, image: &Tensor<f32>, label: usize, path: Option<PathBuf>) -> Result<()> {
        if image.shape() != self.image_shape {
            return Err(Error::Contract(format!(
                "image shape {:?} differs from dataset shape {:?}",
                image.shape(),
                self.image_shape
            )));
        }
        if label >= self.class_names.len() {
            return Err(Error::Contract(format!("label {label} out of range")));
        }
        self.data.extend_from_slice(image.data());
        self.labels.push(label);
        if let Some(p) = path {
            self.paths.push(p);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn per_image(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.per_image();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Stack the given samples into `[n, C, H, W]` in the order supplied.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let [c, h, w] = self.image_shape;
        let mut data = Vec::with_capacity(indices.len() * self.per_image());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let x = Tensor::new(&[indices.len(), c, h, w], data)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// New dataset holding the given samples, in order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut out = LabeledDataset::new(self.image_shape, self.class_names.clone());
        for &i in indices {
            out.data.extend_from_slice(self.image(i));
            out.labels.push(self.labels[i]);
            if let Some(p) = self.paths.get(i) {
                out.paths.push(p.clone());
            }
        }
        out
    }

    /// Consecutive index chunks of `batch` over `order`.
    pub fn batches(order: &[usize], batch: usize) -> impl Iterator<Item = &[usize]> {
        order.chunks(batch.max(1))
    }
}
