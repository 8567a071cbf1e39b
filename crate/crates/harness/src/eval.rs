//! Robustness evaluations over a dataset. Sample loops run on the rayon pool;
//! results are collected in sample order, so they do not depend on scheduling.

use freqsense::corruptions::{patch_shuffle, perturbation_spectrum, pgd_l2, radial_filter, sample_rng, PgdConfig};
use freqsense::data::Dataset;
use freqsense::nn::Model;
use freqsense::sensitivity::{band_masses, sample_indices};
use freqsense::spectral::n_bins;
use rayon::prelude::*;

use crate::error::Result;

const EVAL_BATCH: usize = 128;

/// Fraction of correctly classified samples.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let correct: Vec<usize> = idx
        .par_chunks(EVAL_BATCH)
        .map(|chunk| -> Result<usize> {
            let (x, y) = data.batch(chunk);
            Ok(model.predict(&x)?.iter().zip(&y).filter(|(p, t)| p == t).count())
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// `data` with every image passed through `f(index, image)`, in parallel.
pub fn transform(data: &Dataset, f: impl Fn(usize, &[f64]) -> freqsense::Result<Vec<f64>> + Sync) -> Result<Dataset> {
    let images: Vec<Vec<f64>> =
        (0..data.len()).into_par_iter().map(|i| f(i, data.image(i))).collect::<freqsense::Result<_>>()?;
    Ok(data.map_images(|i, _| Ok(images[i].clone()))?)
}

/// Accuracy after `radial_filter` at each radius.
pub fn filter_eval(model: &Model, data: &Dataset, radii: &[f64]) -> Result<Vec<(f64, f64)>> {
    let (c, n) = (data.channels(), data.n());
    radii
        .iter()
        .map(|&r| Ok((r, accuracy(model, &transform(data, |_, im| radial_filter(im, c, n, r))?)?)))
        .collect()
}

/// Accuracy after `patch_shuffle` with grid `k`; sample `i` uses stream `seed ^ i`.
pub fn patch_eval(model: &Model, data: &Dataset, ks: &[usize], seed: u64) -> Result<Vec<(usize, f64)>> {
    let (c, n) = (data.channels(), data.n());
    ks.iter()
        .map(|&k| Ok((k, accuracy(model, &transform(data, |i, im| patch_shuffle(im, c, n, k, &mut sample_rng(seed, i)))?)?)))
        .collect()
}

/// PGD outcome summary over `n_samples` seeded draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PgdReport {
    pub n_samples: usize,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    /// Mean full-normalisation profile of the perturbations, k = 1..n_bins.
    pub mean_profile: Vec<f64>,
    /// Mean mass in `k <= N/6`.
    pub low_mass: f64,
    /// Perturbations whose spectrum was degenerate (zero gradient throughout).
    pub skipped: usize,
}

pub fn pgd_eval(model: &Model, data: &Dataset, cfg: &PgdConfig, n_samples: usize, seed: u64) -> Result<PgdReport> {
    let (c, n) = (data.channels(), data.n());
    let idx = sample_indices(data.len(), n_samples, seed);
    let per_sample: Vec<(bool, bool, Option<Vec<f64>>)> = idx
        .par_iter()
        .enumerate()
        .map(|(j, &i)| -> Result<_> {
            let (x, y) = data.batch(&[i]);
            let out = pgd_l2(model, &x, &y, cfg, &mut sample_rng(seed, j))?;
            let clean = model.predict(&x)?[0] == y[0];
            let adv = model.predict(&out.x_adv)?[0] == y[0];
            let profile = match perturbation_spectrum(out.delta.data(), c, n) {
                Ok(p) => Some(p.values().to_vec()),
                Err(freqsense::Error::DegenerateSpectrum { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            Ok((clean, adv, profile))
        })
        .collect::<Result<_>>()?;
    let m = per_sample.len().max(1) as f64;
    let mut mean_profile = vec![0.0; n_bins(n)];
    let mut used = 0usize;
    for (_, _, p) in &per_sample {
        if let Some(p) = p {
            mean_profile.iter_mut().zip(p).for_each(|(a, v)| *a += v);
            used += 1;
        }
    }
    if used > 0 {
        mean_profile.iter_mut().for_each(|a| *a /= used as f64);
    }
    let low_mass = band_masses(&freqsense::spectral::RadialProfile::new(mean_profile.clone(), freqsense::spectral::Normalization::Full), n).0;
    Ok(PgdReport {
        n_samples: per_sample.len(),
        clean_accuracy: per_sample.iter().filter(|s| s.0).count() as f64 / m,
        adversarial_accuracy: per_sample.iter().filter(|s| s.1).count() as f64 / m,
        mean_profile,
        low_mass,
        skipped: per_sample.len() - used,
    })
}
