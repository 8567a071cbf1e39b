//! Fourier-sensitivity: the radial power profile of the unitary DFT of a
//! model's input-gradient, per sample and averaged over a dataset.
//!
//! Under `x = A x_a` with `A` unitary, the gradient with respect to `x_a` is
//! `A^-1` applied to the gradient with respect to `x`. With `A` the inverse
//! DFT this makes the DFT of the pixel-space gradient the gradient with
//! respect to the Fourier coefficients of the input, so no Fourier-space
//! forward pass is needed.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{dim_err, value_err, Error, Result};
use crate::nn::{ce_loss, Model};
use crate::spectral::{
    dft2_unitary, fftshift, power_matrix, radial_profile, Normalization, PowerMatrix, RadialIndexMap,
    RadialProfile, Spectrum,
};
use crate::tensor::Tensor;

/// A differentiable scalar loss of a `(B, C, N, N)` image batch.
///
/// The loss must be the batch mean of independent per-sample losses; the
/// per-sample input-gradient is then `B` times the batch gradient.
pub trait ScalarLoss {
    fn loss(&self, tape: &mut Tape, x: Var, labels: &[usize]) -> Result<Var>;

    /// Identifies the function in reports. Zero when not meaningful.
    fn fingerprint(&self) -> u64 {
        0
    }
}

impl ScalarLoss for Model {
    fn loss(&self, tape: &mut Tape, x: Var, labels: &[usize]) -> Result<Var> {
        let params = self.bind_frozen(tape);
        let logits = self.forward(tape, x, &params)?;
        ce_loss(tape, logits, labels)
    }

    fn fingerprint(&self) -> u64 {
        Model::fingerprint(self)
    }
}

/// Per-sample input-gradients `(B, C, N, N)` of the loss.
pub fn input_gradients<L: ScalarLoss + ?Sized>(f: &L, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let batch = images.shape()[0];
    let mut tape = Tape::new();
    let x = tape.leaf(images.clone());
    let loss = f.loss(&mut tape, x, labels)?;
    let g = tape.grad_input(loss, x)?;
    Ok(g.map(|v| v * batch as f64))
}

/// Gradient of the loss at one `(C, N, N)` sample.
pub fn input_gradient<L: ScalarLoss + ?Sized>(f: &L, image: &[f64], shape: (usize, usize), label: usize) -> Result<Tensor> {
    let (c, n) = shape;
    let x = Tensor::new(&[1, c, n, n], image.to_vec())?;
    input_gradients(f, &x, &[label])?.reshaped(&[c, n, n])
}

/// Arithmetic mean over channels of a `(C, N, N)` slice.
pub fn channel_mean(grad: &[f64], channels: usize, n: usize) -> Vec<f64> {
    let plane = n * n;
    let mut out = vec![0.0; plane];
    for c in 0..channels {
        for (o, &g) in out.iter_mut().zip(&grad[c * plane..(c + 1) * plane]) {
            *o += g;
        }
    }
    let inv = 1.0 / channels as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// Shifted unitary spectrum of a channel-averaged `(C, N, N)` gradient.
pub fn gradient_spectrum(grad: &[f64], channels: usize, n: usize) -> Result<Spectrum> {
    let mean = channel_mean(grad, channels, n);
    Ok(fftshift(&dft2_unitary(&mean, (n, n))?))
}

/// The input-gradient in Fourier coordinates, zero-shifted.
pub fn fourier_input_gradient<L: ScalarLoss + ?Sized>(f: &L, image: &[f64], shape: (usize, usize), label: usize) -> Result<Spectrum> {
    let g = input_gradient(f, image, shape, label)?;
    gradient_spectrum(g.data(), shape.0, shape.1)
}

/// Full-normalisation radial profile of one sample's gradient spectrum.
pub fn sample_sensitivity<L: ScalarLoss + ?Sized>(f: &L, image: &[f64], shape: (usize, usize), label: usize) -> Result<RadialProfile> {
    let spec = fourier_input_gradient(f, image, shape, label)?;
    let map = RadialIndexMap::new(shape.1)?;
    radial_profile(&power_matrix(&spec)?, &map, Normalization::Full)
}

/// Aggregate Fourier-sensitivity over sampled dataset points.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub mean: RadialProfile,
    /// Mean of the per-sample inscribed profiles `P~_k`.
    pub inscribed_mean: RadialProfile,
    /// Sample (n - 1) standard deviation per bin; zero with one valid sample.
    pub std: Vec<f64>,
    /// Samples whose profile entered the mean.
    pub n_samples: usize,
    /// Samples skipped because their gradient spectrum was degenerate (in either normalisation).
    pub skipped: usize,
    pub fingerprint: u64,
    /// Mean shifted power matrix, each sample divided by its non-DC total; DC set to 0.
    pub full_map: Option<PowerMatrix>,
}

impl SensitivityReport {
    /// Mass in bins `k <= n/6`.
    pub fn low_mass(&self, n: usize) -> f64 {
        band_masses(&self.mean, n).0
    }
}

/// (low, mid, high) masses: `k <= n/6`, `n/6 < k < n/3`, `k >= n/3`.
pub fn band_masses(profile: &RadialProfile, n: usize) -> (f64, f64, f64) {
    let (mut lo, mut mid, mut hi) = (0.0, 0.0, 0.0);
    for (i, &v) in profile.values().iter().enumerate() {
        let k = i + 1;
        if 6 * k <= n {
            lo += v;
        } else if 3 * k < n {
            mid += v;
        } else {
            hi += v;
        }
    }
    (lo, mid, hi)
}

/// Picks `count` distinct indices from `0..len` with a seeded partial Fisher-Yates.
pub fn sample_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..len).collect();
    let count = count.min(len);
    for i in 0..count {
        let j = rng.random_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx
}

/// Per-sample profiles and normalised power maps for a batch of dataset indices.
/// `None` marks a degenerate sample.
fn batch_profiles<L: ScalarLoss + ?Sized>(
    f: &L,
    data: &Dataset,
    indices: &[usize],
    map: &RadialIndexMap,
) -> Result<Vec<Option<(RadialProfile, RadialProfile, PowerMatrix)>>> {
    let (x, labels) = data.batch(indices);
    let grads = input_gradients(f, &x, &labels)?;
    let per = data.image_len();
    let mut out = Vec::with_capacity(indices.len());
    for b in 0..indices.len() {
        let spec = gradient_spectrum(&grads.data()[b * per..(b + 1) * per], data.channels(), data.n())?;
        let p = power_matrix(&spec)?;
        let full = radial_profile(&p, map, Normalization::Full);
        let inscribed = radial_profile(&p, map, Normalization::Inscribed);
        match (full, inscribed) {
            (Ok(full), Ok(inscribed)) => out.push(Some((full, inscribed, p))),
            (Err(Error::DegenerateSpectrum { .. }), _) | (_, Err(Error::DegenerateSpectrum { .. })) => out.push(None),
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Ok(out)
}

const SENSITIVITY_BATCH: usize = 64;

/// Mean and spread of per-sample sensitivity over `n_samples` seeded draws.
pub fn model_sensitivity<L: ScalarLoss + ?Sized>(
    f: &L,
    data: &Dataset,
    n_samples: usize,
    seed: u64,
    with_full_map: bool,
) -> Result<SensitivityReport> {
    if n_samples > data.len() {
        return value_err(format!("requested {n_samples} samples from a dataset of {}", data.len()));
    }
    let n = data.n();
    let map = RadialIndexMap::new(n)?;
    let indices = sample_indices(data.len(), n_samples, seed);
    let dc = (n / 2) * n + n / 2;

    let mut profiles: Vec<Vec<f64>> = Vec::new();
    let mut inscribed = vec![0.0; map.n_bins()];
    let mut full = vec![0.0; n * n];
    let mut skipped = 0;
    for chunk in indices.chunks(SENSITIVITY_BATCH) {
        for item in batch_profiles(f, data, chunk, &map)? {
            match item {
                None => skipped += 1,
                Some((prof, ins, p)) => {
                    inscribed.iter_mut().zip(ins.values()).for_each(|(a, v)| *a += v);
                    if with_full_map {
                        let total: f64 = p.total() - p.values()[dc];
                        for (i, (acc, &v)) in full.iter_mut().zip(p.values()).enumerate() {
                            if i != dc {
                                *acc += v / total;
                            }
                        }
                    }
                    profiles.push(prof.values().to_vec());
                }
            }
        }
    }
    if profiles.is_empty() {
        return Err(Error::DegenerateSpectrum { power: 0.0, threshold: crate::spectral::EPS_DIV });
    }
    let m = profiles.len();
    let bins = profiles[0].len();
    let mut mean = vec![0.0; bins];
    for p in &profiles {
        for (a, v) in mean.iter_mut().zip(p) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    inscribed.iter_mut().for_each(|a| *a /= m as f64);
    let mut std = vec![0.0; bins];
    if m > 1 {
        for p in &profiles {
            for ((s, v), mu) in std.iter_mut().zip(p).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / (m - 1) as f64).sqrt());
    }
    let full_map = if with_full_map {
        full.iter_mut().for_each(|v| *v /= m as f64);
        Some(PowerMatrix::from_values(full, n)?)
    } else {
        None
    };
    Ok(SensitivityReport {
        mean: RadialProfile::new(mean, Normalization::Full),
        inscribed_mean: RadialProfile::new(inscribed, Normalization::Inscribed),
        std,
        n_samples: m,
        skipped,
        fingerprint: f.fingerprint(),
        full_map,
    })
}

/// Mean value per rounded radius `k = 1..=n_bins` of a shifted map, i.e. the
/// per-coefficient average rather than the per-radius total.
pub fn radial_mean(p: &PowerMatrix, map: &RadialIndexMap) -> Vec<f64> {
    let bins = map.n_bins();
    let mut sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (cell, &v) in p.values().iter().enumerate() {
        if let Some(k) = map.bin(cell) {
            sum[k - 1] += v;
            count[k - 1] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return dim_err(format!("{dim}x{dim} matrix needs {} values, got {}", dim * dim, data.len()));
        }
        Ok(Self { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, data }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| self.data[i * self.dim..(i + 1) * self.dim].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// Max entry of `|A^T A - I|`.
    pub fn unitarity_defect(&self) -> f64 {
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|r| self.data[r * d + i] * self.data[r * d + j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    /// Solves `A y = b` by Gaussian elimination with partial pivoting.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut a = self.data.clone();
        let mut y = b.to_vec();
        let scale = a.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for col in 0..d {
            let pivot = (col..d).max_by(|&i, &j| a[i * d + col].abs().total_cmp(&a[j * d + col].abs())).unwrap();
            if a[pivot * d + col].abs() <= 1e-12 * scale.max(1.0) {
                return value_err("operator is singular (not invertible)");
            }
            if pivot != col {
                for k in 0..d {
                    a.swap(pivot * d + k, col * d + k);
                }
                y.swap(pivot, col);
            }
            for row in col + 1..d {
                let factor = a[row * d + col] / a[col * d + col];
                if factor != 0.0 {
                    for k in col..d {
                        a[row * d + k] -= factor * a[col * d + k];
                    }
                    y[row] -= factor * y[col];
                }
            }
        }
        for col in (0..d).rev() {
            let s: f64 = (col + 1..d).map(|k| a[col * d + k] * y[k]).sum();
            y[col] = (y[col] - s) / a[col * d + col];
        }
        Ok(y)
    }
}

/// Outcome of comparing `A^-1 J_f(x)` with finite differences in `A`-coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisTrickCheck {
    /// Max absolute difference between the two gradients.
    pub residual: f64,
    /// Max entry of `|A^T A - I|`.
    pub unitarity_defect: f64,
}

impl BasisTrickCheck {
    pub fn is_unitary(&self) -> bool {
        self.unitarity_defect <= 1e-8
    }
}

/// Checks the change-of-basis gradient identity for `x = A x_a`.
///
/// `f` is the scalar function in pixel coordinates and `grad_x` its gradient
/// at `x`. The identity `J(x_a) = A^-1 J(x)` holds exactly when `A` is
/// unitary; for other invertible operators the residual is large.
pub fn basis_trick_check(f: &dyn Fn(&[f64]) -> f64, grad_x: &[f64], x: &[f64], a: &SquareMatrix, step: f64) -> Result<BasisTrickCheck> {
    let d = a.dim;
    if x.len() != d || grad_x.len() != d {
        return dim_err(format!("operator is {d}x{d} but input has {} values", x.len()));
    }
    let xa = a.solve(x)?;
    let predicted = a.solve(grad_x)?;
    let mut residual: f64 = 0.0;
    let mut probe = xa.clone();
    for i in 0..d {
        probe[i] = xa[i] + step;
        let up = f(&a.apply(&probe));
        probe[i] = xa[i] - step;
        let down = f(&a.apply(&probe));
        probe[i] = xa[i];
        let fd = (up - down) / (2.0 * step);
        residual = residual.max((fd - predicted[i]).abs());
    }
    Ok(BasisTrickCheck { residual, unitarity_defect: a.unitarity_defect() })
}
