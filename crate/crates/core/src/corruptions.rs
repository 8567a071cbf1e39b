//! Frequency-targeted input transforms: single-mode Fourier noise, radial and
//! band-pass filtering, patch-shuffle, Gaussian noise and an l2 PGD attack.
//!
//! Images are flat `C x N x N` channel-planar slices. Filters work on each
//! channel independently. The filter mask uses the exact Euclidean distance
//! to the zero-frequency centre; radial binning in [`crate::spectral`] rounds
//! it instead, and the two intentionally differ.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{dim_err, value_err, Result};
use crate::sensitivity::{gradient_spectrum, input_gradients, ScalarLoss};
use crate::spectral::{
    check_side, dft2_unitary, fftshift, idft2_real, ifftshift, power_matrix, radial_profile, Normalization,
    RadialIndexMap, RadialProfile, Spectrum,
};
use crate::tensor::Tensor;

/// Independent per-sample stream: `seed ^ index`.
pub fn sample_rng(seed: u64, index: usize) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed ^ index as u64)
}

fn check_image(image: &[f64], channels: usize, n: usize) -> Result<()> {
    check_side(n)?;
    if channels == 0 || image.len() != channels * n * n {
        return dim_err(format!("image has {} values, expected {channels} x {n} x {n}", image.len()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Cosine,
    Random,
}

/// A single frequency at shifted indices `(u, v)`, scaled to spatial l2 norm `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourierMode {
    pub u: usize,
    pub v: usize,
    pub epsilon: f64,
    pub phase: Phase,
}

impl FourierMode {
    pub fn new(u: usize, v: usize, epsilon: f64, phase: Phase) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return value_err(format!("epsilon must be finite and > 0, got {epsilon}"));
        }
        Ok(Self { u, v, epsilon, phase })
    }
}

/// Real `N x N` perturbation whose spectrum is supported on `(u, v)` and its
/// Hermitian partner, with `||.||_2 = epsilon`.
pub fn fourier_mode_noise(n: usize, mode: &FourierMode, rng: &mut impl Rng) -> Result<Vec<f64>> {
    check_side(n)?;
    let (u, v) = (mode.u, mode.v);
    if u >= n || v >= n {
        return dim_err(format!("mode ({u}, {v}) outside a {n} x {n} spectrum"));
    }
    let c = n / 2;
    if (u, v) == (c, c) {
        return value_err("the zero-frequency mode is a brightness shift, not a corruption");
    }
    let phi = match mode.phase {
        Phase::Cosine => 0.0,
        Phase::Random => rng.random_range(0.0..2.0 * PI),
    };
    let (pu, pv) = ((n - u) % n, (n - v) % n);
    let mut data = vec![Complex64::default(); n * n];
    if (pu, pv) == (u, v) {
        // self-conjugate: the coefficient must be real
        data[u * n + v] = Complex64::new(if phi.cos() < 0.0 { -1.0 } else { 1.0 }, 0.0);
    } else {
        data[u * n + v] = Complex64::from_polar(1.0, phi);
        data[pu * n + pv] = Complex64::from_polar(1.0, -phi);
    }
    let spatial = idft2_real(&ifftshift(&Spectrum::new(data, n, true)?))?;
    let norm = spatial.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(spatial.into_iter().map(|x| x * mode.epsilon / norm).collect())
}

/// `image + delta`, broadcasting a single-plane `delta` over channels.
pub fn apply_additive(image: &[f64], delta: &[f64], clip: bool) -> Result<Vec<f64>> {
    if delta.is_empty() || image.len() % delta.len() != 0 {
        return dim_err(format!("perturbation of {} values does not tile an image of {}", delta.len(), image.len()));
    }
    Ok(image
        .iter()
        .zip(delta.iter().cycle())
        .map(|(x, d)| if clip { (x + d).clamp(0.0, 1.0) } else { x + d })
        .collect())
}

/// Low-pass mask `M_r(u, v) = [d((u, v), centre) <= r]` on a shifted spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialMask {
    pub r: f64,
    pub n: usize,
}

impl RadialMask {
    pub fn new(n: usize, r: f64) -> Result<Self> {
        check_side(n)?;
        if !(r >= 0.0) {
            return value_err(format!("radius must be >= 0, got {r}"));
        }
        Ok(Self { r, n })
    }

    pub fn keeps(&self, u: usize, v: usize) -> bool {
        within(centre_distance(self.n, u, v), self.r)
    }
}

/// Distances within this of a bound count as on it, so `r = N / sqrt 2` keeps the corners.
const DIST_TOL: f64 = 1e-9;

fn within(d: f64, r: f64) -> bool {
    d <= r + DIST_TOL
}

fn centre_distance(n: usize, u: usize, v: usize) -> f64 {
    let c = (n / 2) as f64;
    ((u as f64 - c).powi(2) + (v as f64 - c).powi(2)).sqrt()
}

/// Applies a shifted-spectrum mask to each channel. The mask must be
/// centrosymmetric so the result stays real.
fn mask_channels(image: &[f64], channels: usize, n: usize, keep: impl Fn(f64) -> bool) -> Result<Vec<f64>> {
    check_image(image, channels, n)?;
    let mut out = Vec::with_capacity(image.len());
    for plane in image.chunks(n * n) {
        let mut spec = fftshift(&dft2_unitary(plane, (n, n))?);
        for u in 0..n {
            for v in 0..n {
                if !keep(centre_distance(n, u, v)) {
                    spec.data_mut()[u * n + v] = Complex64::default();
                }
            }
        }
        out.extend(idft2_real(&ifftshift(&spec))?);
    }
    Ok(out)
}

/// `F^-1(F(X) . M_r)` per channel.
pub fn radial_filter(image: &[f64], channels: usize, n: usize, r: f64) -> Result<Vec<f64>> {
    let mask = RadialMask::new(n, r)?;
    mask_channels(image, channels, n, |d| within(d, mask.r))
}

/// Keeps coefficients with `lo <= d <= hi` (DC exactly when `lo == 0`).
/// `contrast_maximise` min-max rescales each channel to `[0, 1]` for display.
pub fn band_pass_filter(image: &[f64], channels: usize, n: usize, lo: f64, hi: f64, contrast_maximise: bool) -> Result<Vec<f64>> {
    if !(lo >= 0.0) || !(lo <= hi) {
        return value_err(format!("band needs 0 <= lo <= hi, got [{lo}, {hi}]"));
    }
    let mut out = mask_channels(image, channels, n, |d| within(lo, d) && within(d, hi))?;
    if contrast_maximise {
        for plane in out.chunks_mut(n * n) {
            let (min, max) = plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let span = max - min;
            plane.iter_mut().for_each(|x| *x = if span > 0.0 { (*x - min) / span } else { 0.0 });
        }
    }
    Ok(out)
}

/// Splits each channel into `k x k` squares and permutes them with one
/// Fisher-Yates draw shared by all channels.
pub fn patch_shuffle(image: &[f64], channels: usize, n: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    check_image(image, channels, n)?;
    if k == 0 || n % k != 0 {
        return value_err(format!("patch grid {k} does not divide side {n}"));
    }
    let cells = k * k;
    let mut perm: Vec<usize> = (0..cells).collect();
    for i in (1..cells).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let s = n / k;
    let mut out = vec![0.0; image.len()];
    for (plane_in, plane_out) in image.chunks(n * n).zip(out.chunks_mut(n * n)) {
        for (dst, &src) in perm.iter().enumerate() {
            let (dr, dc) = (dst / k * s, dst % k * s);
            let (sr, sc) = (src / k * s, src % k * s);
            for row in 0..s {
                let from = (sr + row) * n + sc;
                let to = (dr + row) * n + dc;
                plane_out[to..to + s].copy_from_slice(&plane_in[from..from + s]);
            }
        }
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, sigma^2)` to every pixel.
pub fn gaussian_noise(image: &[f64], sigma: f64, rng: &mut impl Rng, clip: bool) -> Result<Vec<f64>> {
    if sigma == 0.0 {
        return Ok(image.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| crate::Error::Value(format!("sigma {sigma}: {e}")))?;
    Ok(image
        .iter()
        .map(|&x| {
            let y = x + normal.sample(rng);
            if clip {
                y.clamp(0.0, 1.0)
            } else {
                y
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

impl PgdConfig {
    /// `steps` iterations with `step_size = epsilon / steps`.
    pub fn standard(epsilon: f64, steps: usize) -> Self {
        Self { epsilon, steps, step_size: epsilon / steps.max(1) as f64, random_start: false }
    }
}

/// Adversarial batch and the unclipped perturbations that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PgdOutcome {
    /// `clip(x + delta, 0, 1)`.
    pub x_adv: Tensor,
    /// Final `delta` before clipping; `||delta_b||_2 <= epsilon` per sample.
    pub delta: Tensor,
}

fn project_l2(d: &mut [f64], eps: f64) {
    let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > eps {
        d.iter_mut().for_each(|x| *x *= eps / norm);
    }
}

/// Normalised-gradient l2 PGD on the per-sample loss, from `delta = 0` unless
/// `random_start`. A zero gradient leaves that sample's `delta` unchanged.
pub fn pgd_l2<L: ScalarLoss + ?Sized>(
    f: &L,
    images: &Tensor,
    labels: &[usize],
    cfg: &PgdConfig,
    rng: &mut impl Rng,
) -> Result<PgdOutcome> {
    if !(cfg.epsilon > 0.0) || !(cfg.step_size >= 0.0) {
        return value_err(format!("pgd needs epsilon > 0 and step_size >= 0, got {} and {}", cfg.epsilon, cfg.step_size));
    }
    let s = images.shape();
    if s.len() != 4 {
        return dim_err(format!("pgd expects (B, C, N, N), got {s:?}"));
    }
    let per = images.numel() / s[0].max(1);
    let mut delta = vec![0.0; images.numel()];
    if cfg.random_start {
        // uniform in the ball: gaussian direction, radius eps * U^(1/d)
        for d in delta.chunks_mut(per) {
            d.iter_mut().for_each(|x| *x = StandardNormal.sample(rng));
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            let radius = cfg.epsilon * rng.random::<f64>().powf(1.0 / per as f64);
            d.iter_mut().for_each(|x| *x *= radius / norm);
        }
    }
    for _ in 0..cfg.steps {
        let x: Vec<f64> = images.data().iter().zip(&delta).map(|(a, b)| a + b).collect();
        let g = input_gradients(f, &Tensor::new(s, x)?, labels)?;
        for (d, gb) in delta.chunks_mut(per).zip(g.data().chunks(per)) {
            let norm = gb.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                d.iter_mut().zip(gb).for_each(|(di, gi)| *di += cfg.step_size * gi / norm);
                project_l2(d, cfg.epsilon);
            }
        }
    }
    let x_adv = images.data().iter().zip(&delta).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect();
    Ok(PgdOutcome { x_adv: Tensor::new(s, x_adv)?, delta: Tensor::new(s, delta)? })
}

/// Full-normalisation radial profile of a channel-averaged `(C, N, N)`
/// perturbation; the same path as gradient sensitivity.
pub fn perturbation_spectrum(delta: &[f64], channels: usize, n: usize) -> Result<RadialProfile> {
    check_image(delta, channels, n)?;
    let spec = gradient_spectrum(delta, channels, n)?;
    radial_profile(&power_matrix(&spec)?, &RadialIndexMap::new(n)?, Normalization::Full)
}
