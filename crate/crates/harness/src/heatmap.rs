//! Fourier-noise heat maps: error rate under single-mode additive noise for
//! every frequency of the shifted spectrum.

use freqsense::corruptions::{apply_additive, fourier_mode_noise, sample_rng, FourierMode, Phase};
use freqsense::data::Dataset;
use freqsense::nn::Model;
use freqsense::sensitivity::{radial_mean, sample_indices};
use freqsense::spectral::{PowerMatrix, RadialIndexMap};
use freqsense::Tensor;
use rayon::prelude::*;

use crate::error::Result;

/// Error-rate matrix in shifted layout; DC is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub n: usize,
    pub epsilon: f64,
    pub n_samples: usize,
    pub errors: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.errors[u * self.n + v]
    }

    /// Mean error per rounded radius `k = 1..=n_bins`.
    pub fn radial_error(&self) -> Result<Vec<f64>> {
        let map = RadialIndexMap::new(self.n)?;
        Ok(radial_mean(&PowerMatrix::from_values(self.errors.clone(), self.n)?, &map))
    }
}

/// Half-plane representatives: `(u, v) <= partner` lexicographically, DC excluded.
fn half_plane(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for u in 0..n {
        for v in 0..n {
            let p = ((n - u) % n, (n - v) % n);
            if (u, v) != (n / 2, n / 2) && (u, v) <= p {
                out.push((u, v));
            }
        }
    }
    out
}

/// Error rate over `n_samples` seeded draws for each mode at l2 norm
/// `epsilon`, random phase per (mode, sample), no clipping. The Hermitian
/// partner of every evaluated cell is filled by mirroring.
pub fn fourier_noise_heatmap(model: &Model, data: &Dataset, epsilon: f64, n_samples: usize, seed: u64) -> Result<Heatmap> {
    let n = data.n();
    let idx = sample_indices(data.len(), n_samples, seed);
    let (x, labels) = data.batch(&idx);
    let modes = half_plane(n);
    let per_image = data.image_len();
    let rates: Vec<f64> = modes
        .par_iter()
        .enumerate()
        .map(|(m, &(u, v))| -> Result<f64> {
            let mode = FourierMode::new(u, v, epsilon, Phase::Random)?;
            let mut noisy = Vec::with_capacity(x.numel());
            for (j, img) in x.data().chunks(per_image).enumerate() {
                let d = fourier_mode_noise(n, &mode, &mut sample_rng(seed, m * idx.len() + j))?;
                noisy.extend(apply_additive(img, &d, false)?);
            }
            let pred = model.predict(&Tensor::new(x.shape(), noisy)?)?;
            let wrong = pred.iter().zip(&labels).filter(|(p, t)| p != t).count();
            Ok(if idx.is_empty() { 0.0 } else { wrong as f64 / idx.len() as f64 })
        })
        .collect::<Result<_>>()?;
    let mut errors = vec![0.0; n * n];
    for (&(u, v), r) in modes.iter().zip(rates) {
        errors[u * n + v] = r;
        errors[((n - u) % n) * n + (n - v) % n] = r;
    }
    Ok(Heatmap { n, epsilon, n_samples: idx.len(), errors })
}
