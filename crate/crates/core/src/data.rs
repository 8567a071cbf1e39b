//! Labelled image collections shared by training, analysis and evaluation.

use crate::error::{dim_err, value_err, Result};
use crate::tensor::Tensor;

/// Images stored as flat `C x N x N` planes (row-major, channel-planar) in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    channels: usize,
    n: usize,
    classes: usize,
    images: Vec<Vec<f64>>,
    labels: Vec<usize>,
    pub split: String,
    pub provenance: String,
}

impl Dataset {
    pub fn new(channels: usize, n: usize, classes: usize) -> Self {
        Self {
            channels,
            n,
            classes,
            images: Vec::new(),
            labels: Vec::new(),
            split: String::new(),
            provenance: String::new(),
        }
    }

    pub fn with_meta(mut self, split: impl Into<String>, provenance: impl Into<String>) -> Self {
        self.split = split.into();
        self.provenance = provenance.into();
        self
    }

    pub fn push(&mut self, image: Vec<f64>, label: usize) -> Result<()> {
        if image.len() != self.image_len() {
            return dim_err(format!("image has {} values, expected {}", image.len(), self.image_len()));
        }
        if label >= self.classes {
            return value_err(format!("label {label} out of range for {} classes", self.classes));
        }
        self.images.push(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.n * self.n
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Stacks the selected samples into a `(B, C, N, N)` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(&[indices.len(), self.channels, self.n, self.n], data).expect("batch shape");
        (t, labels)
    }

    /// A new dataset with every image passed through `f`.
    pub fn map_images(&self, mut f: impl FnMut(usize, &[f64]) -> Result<Vec<f64>>) -> Result<Self> {
        let mut out = Self { images: Vec::with_capacity(self.len()), ..self.clone_empty() };
        for (i, img) in self.images.iter().enumerate() {
            out.push(f(i, img)?, self.labels[i])?;
        }
        Ok(out)
    }

    /// The first `count` samples (or all, if fewer).
    pub fn take(&self, count: usize) -> Self {
        let k = count.min(self.len());
        Self { images: self.images[..k].to_vec(), labels: self.labels[..k].to_vec(), ..self.clone_empty() }
    }

    fn clone_empty(&self) -> Self {
        Self {
            channels: self.channels,
            n: self.n,
            classes: self.classes,
            images: Vec::new(),
            labels: Vec::new(),
            split: self.split.clone(),
            provenance: self.provenance.clone(),
        }
    }
}
