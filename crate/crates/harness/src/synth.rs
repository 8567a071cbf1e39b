//! Frequency-planted synthetic classification data.
//!
//! Each image is a sum of unit-norm random-phase Fourier modes from its
//! class band, plus distractor modes from a separate band, plus a Gaussian
//! floor, min-max scaled to `[0, 1]`. Bands are intervals of the exact
//! distance to the zero-frequency centre.

use freqsense::corruptions::{fourier_mode_noise, FourierMode, Phase};
use freqsense::data::Dataset;
use freqsense::spectral::n_bins;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// How distractor modes relate to the labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistractorKind {
    /// Every mode of the band in every image, fresh random phase: carries no label information.
    #[default]
    Shared,
    /// Every mode of the band with one phase pattern drawn from the seed, identical in all images.
    Fixed,
    /// Band modes dealt round-robin to classes; an image carries its class's modes only.
    ClassKeyed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistractorConfig {
    pub band: (f64, f64),
    pub amplitude: f64,
    #[serde(default)]
    pub kind: DistractorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// One exact-distance interval per class.
    #[serde(default = "default_bands")]
    pub class_bands: Vec<(f64, f64)>,
    #[serde(default)]
    pub distractor: Option<DistractorConfig>,
    #[serde(default = "default_samples")]
    pub samples_per_class: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_n() -> usize {
    16
}

fn default_channels() -> usize {
    1
}

fn default_bands() -> Vec<(f64, f64)> {
    vec![(1.0, 2.0), (3.0, 4.0), (5.0, 6.0), (7.0, 8.0)]
}

fn default_samples() -> usize {
    500
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: default_n(),
            channels: default_channels(),
            class_bands: default_bands(),
            distractor: None,
            samples_per_class: default_samples(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// One representative (shifted indices) per Hermitian pair with `lo <= d <= hi`, `d > 0`.
pub fn band_modes(n: usize, lo: f64, hi: f64) -> Vec<(usize, usize)> {
    let c = (n / 2) as f64;
    let mut out = Vec::new();
    for u in 0..n {
        for v in 0..n {
            let d = ((u as f64 - c).powi(2) + (v as f64 - c).powi(2)).sqrt();
            if d == 0.0 || d < lo - 1e-9 || d > hi + 1e-9 {
                continue;
            }
            let partner = ((n - u) % n, (n - v) % n);
            if (u, v) <= partner {
                out.push((u, v));
            }
        }
    }
    out
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Config(msg.into()))
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        freqsense::spectral::check_side(self.n)?;
        if self.channels == 0 || self.class_bands.len() < 2 {
            return config_err("need at least one channel and two class bands");
        }
        let top = n_bins(self.n) as f64;
        for (i, &(lo, hi)) in self.class_bands.iter().enumerate() {
            if !(1.0 <= lo && lo <= hi && hi <= top) {
                return config_err(format!("class band {i} [{lo}, {hi}] must lie within [1, {top}]"));
            }
            if band_modes(self.n, lo, hi).is_empty() {
                return config_err(format!("class band {i} [{lo}, {hi}] contains no frequency"));
            }
            for (j, &(lo2, hi2)) in self.class_bands.iter().enumerate().skip(i + 1) {
                if lo <= hi2 && lo2 <= hi {
                    return config_err(format!("class bands {i} and {j} overlap"));
                }
            }
        }
        if let Some(d) = &self.distractor {
            if !(d.amplitude >= 0.0) || band_modes(self.n, d.band.0, d.band.1).is_empty() {
                return config_err("distractor needs amplitude >= 0 and a non-empty band");
            }
            if d.kind == DistractorKind::ClassKeyed && band_modes(self.n, d.band.0, d.band.1).len() < self.class_bands.len() {
                return config_err("class-keyed distractor band has fewer modes than classes");
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return config_err("noise_sigma must be >= 0");
        }
        Ok(())
    }
}

fn add_mode(plane: &mut [f64], n: usize, (u, v): (usize, usize), amplitude: f64, rng: &mut Xoshiro256PlusPlus) -> Result<()> {
    let m = FourierMode::new(u, v, 1.0, Phase::Random)?;
    for (p, d) in plane.iter_mut().zip(fourier_mode_noise(n, &m, rng)?) {
        *p += amplitude * d;
    }
    Ok(())
}

/// Generates `samples_per_class` images per class, interleaved by class.
pub fn gen_synthetic_freq_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n;
    let classes = cfg.class_bands.len();
    let class_modes: Vec<Vec<(usize, usize)>> = cfg.class_bands.iter().map(|&(lo, hi)| band_modes(n, lo, hi)).collect();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let distractor = cfg.distractor.as_ref().map(|d| (d, band_modes(n, d.band.0, d.band.1)));
    let fixed_pattern = match &distractor {
        Some((d, modes)) if d.kind == DistractorKind::Fixed && d.amplitude > 0.0 => {
            let mut plane = vec![0.0; n * n];
            for &m in modes {
                add_mode(&mut plane, n, m, d.amplitude, &mut rng)?;
            }
            Some(plane)
        }
        _ => None,
    };

    let mut data = Dataset::new(cfg.channels, n, classes).with_meta("train", format!("synthetic seed {}", cfg.seed));
    for _ in 0..cfg.samples_per_class {
        for (label, modes) in class_modes.iter().enumerate() {
            let mut img = Vec::with_capacity(cfg.channels * n * n);
            for _ in 0..cfg.channels {
                let mut plane = vec![0.0; n * n];
                for &m in modes {
                    add_mode(&mut plane, n, m, 1.0, &mut rng)?;
                }
                if let Some((d, dmodes)) = &distractor {
                    match d.kind {
                        DistractorKind::Shared => {
                            for &m in dmodes {
                                add_mode(&mut plane, n, m, d.amplitude, &mut rng)?;
                            }
                        }
                        DistractorKind::Fixed => {
                            if let Some(p) = &fixed_pattern {
                                plane.iter_mut().zip(p).for_each(|(a, b)| *a += b);
                            }
                        }
                        DistractorKind::ClassKeyed => {
                            for &m in dmodes.iter().skip(label).step_by(classes) {
                                add_mode(&mut plane, n, m, d.amplitude, &mut rng)?;
                            }
                        }
                    }
                }
                if cfg.noise_sigma > 0.0 {
                    plane.iter_mut().for_each(|p| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *p += cfg.noise_sigma * z;
                    });
                }
                img.extend(plane);
            }
            let (min, max) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let span = max - min;
            img.iter_mut().for_each(|x| *x = if span > 0.0 { (*x - min) / span } else { 0.5 });
            data.push(img, label)?;
        }
    }
    Ok(data)
}

/// Deterministic test split: same config with the seed offset.
pub fn gen_split(cfg: &SynthConfig, samples_per_class: usize, seed_offset: u64, split: &str) -> Result<Dataset> {
    let c = SynthConfig { samples_per_class, seed: cfg.seed.wrapping_add(seed_offset), ..cfg.clone() };
    let mut d = gen_synthetic_freq_dataset(&c)?;
    d.split = split.to_string();
    Ok(d)
}
