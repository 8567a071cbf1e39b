//! Fourier-regularisation: penalties on the radial power profile of the
//! input-gradient, trained through double backprop.
//!
//! | kind | penalty                                  |
//! |------|------------------------------------------|
//! | LSF  | `sum_{k > N/6} P_k`                      |
//! | MSF  | `sum_{k < N/6} P_k + sum_{k > N/3} P_k`  |
//! | HSF  | `sum_{k < N/3} P_k`                      |
//! | ASF  | `sum_{k=1}^{N/2} P~_k log P~_k`          |
//!
//! The power terms are rebuilt on the tape from the input-gradient node, so
//! the whole objective is differentiable with respect to the parameters.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Tape, Var};
use crate::corruptions::{gaussian_noise, pgd_l2, PgdConfig};
use crate::data::Dataset;
use crate::error::{contract_err, dim_err, value_err, Error, Result};
use crate::nn::{ce_loss, sgd_step, Model, OptimState};
use crate::sensitivity::{band_masses, input_gradients, model_sensitivity};
use crate::spectral::{check_side, n_bins, RadialIndexMap};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegularizerKind {
    None,
    Lsf,
    Msf,
    Hsf,
    Asf,
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "lsf" => Ok(Self::Lsf),
            "msf" => Ok(Self::Msf),
            "hsf" => Ok(Self::Hsf),
            "asf" => Ok(Self::Asf),
            other => value_err(format!("unknown regularizer {other:?}")),
        }
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Lsf => "lsf",
            Self::Msf => "msf",
            Self::Hsf => "hsf",
            Self::Asf => "asf",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub lambda: f64,
    pub n: usize,
    pub eps_div: f64,
    pub eps_log: f64,
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind, lambda: f64, n: usize) -> Result<Self> {
        check_side(n)?;
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return value_err(format!("lambda must be finite and >= 0, got {lambda}"));
        }
        Ok(Self { kind, lambda, n, eps_div: 1e-12, eps_log: 1e-12 })
    }

    pub fn none(n: usize) -> Self {
        Self { kind: RegularizerKind::None, lambda: 0.0, n, eps_div: 1e-12, eps_log: 1e-12 }
    }

    /// Whether bin `k` is penalised (LSF/MSF/HSF). Exact integer comparisons.
    pub fn penalizes(&self, k: usize) -> bool {
        let n = self.n;
        match self.kind {
            RegularizerKind::Lsf => 6 * k > n,
            RegularizerKind::Msf => 6 * k < n || 3 * k > n,
            RegularizerKind::Hsf => 3 * k < n,
            RegularizerKind::Asf | RegularizerKind::None => false,
        }
    }

    /// Penalised bins `1..=floor(n/sqrt 2)` for the band kinds.
    pub fn penalized_bins(&self) -> Vec<usize> {
        (1..=n_bins(self.n)).filter(|&k| self.penalizes(k)).collect()
    }

    /// Whether the regulariser contributes to the training objective.
    pub fn is_active(&self) -> bool {
        self.kind != RegularizerKind::None && self.lambda != 0.0
    }
}

/// Per-sample, per-bin gradient power `(B, n_bins)` recorded on the tape.
///
/// `grad` is `(B, C, N, N)`; channels are averaged, the unitary DFT is taken
/// and squared moduli are summed into rounded-radius bins (DC dropped).
pub fn gradient_bin_powers(tape: &mut Tape, grad: Var, n: usize) -> Result<Var> {
    let s = tape.shape(grad).to_vec();
    if s.len() != 4 || s[2] != n || s[3] != n {
        return dim_err(format!("gradient must be (B, C, {n}, {n}), got {s:?}"));
    }
    let (batch, channels) = (s[0], s[1]);
    let summed = tape.sum_axis(grad, 1)?;
    let mean = tape.scale(summed, 1.0 / channels as f64);
    let zeros = tape.constant(Tensor::zeros(&[batch, n, n]));
    let z = tape.complex_pack(mean, zeros)?;
    let fz = tape.dft2(z, false)?;
    let re = tape.component(fz, 0)?;
    let im = tape.component(fz, 1)?;
    let re2 = tape.square(re);
    let im2 = tape.square(im);
    let power = tape.add(re2, im2)?;
    let flat = tape.reshape(power, &[batch, n * n])?;

    let map = RadialIndexMap::new(n)?;
    let bins = map.n_bins();
    let h = n / 2;
    let mut sel = vec![0.0; n * n * bins];
    for u in 0..n {
        for v in 0..n {
            // natural (u, v) sits at shifted ((u + h) mod n, (v + h) mod n)
            let shifted = ((u + h) % n) * n + (v + h) % n;
            if let Some(k) = map.bin(shifted) {
                sel[(u * n + v) * bins + k - 1] = 1.0;
            }
        }
    }
    let sel = tape.constant(Tensor::new(&[n * n, bins], sel)?);
    tape.matmul(flat, sel)
}

/// Column selector `(rows, 1)` with ones at the given 0-based rows.
fn selector(tape: &mut Tape, rows: usize, pick: impl Fn(usize) -> bool) -> Result<Var> {
    let data = (0..rows).map(|r| if pick(r) { 1.0 } else { 0.0 }).collect();
    Ok(tape.constant(Tensor::new(&[rows, 1], data)?))
}

/// The regulariser value, averaged over the batch, from `(B, n_bins)` bin powers.
pub fn sfs_from_bin_powers(tape: &mut Tape, bins: Var, spec: &RegularizerSpec) -> Result<Var> {
    let s = tape.shape(bins).to_vec();
    let k_max = n_bins(spec.n);
    if s.len() != 2 || s[1] != k_max {
        return dim_err(format!("bin powers must be (B, {k_max}), got {s:?}"));
    }
    match spec.kind {
        RegularizerKind::None => contract_err("regularizer kind none has no loss; skip it"),
        RegularizerKind::Lsf | RegularizerKind::Msf | RegularizerKind::Hsf => {
            let all = selector(tape, k_max, |_| true)?;
            let pen = selector(tape, k_max, |r| spec.penalizes(r + 1))?;
            let total = tape.matmul(bins, all)?;
            let penalized = tape.matmul(bins, pen)?;
            let frac = tape.div_eps(penalized, total, spec.eps_div)?;
            Ok(tape.mean(frac))
        }
        RegularizerKind::Asf => {
            let top = spec.n / 2;
            let mut pick = vec![0.0; k_max * top];
            for k in 0..top {
                pick[k * top + k] = 1.0;
            }
            let pick = tape.constant(Tensor::new(&[k_max, top], pick)?);
            let inside = tape.matmul(bins, pick)?;
            let ones = selector(tape, top, |_| true)?;
            let total = tape.matmul(inside, ones)?;
            let row = tape.constant(Tensor::full(&[1, top], 1.0));
            let total_b = tape.matmul(total, row)?;
            let p = tape.div_eps(inside, total_b, spec.eps_div)?;
            let shifted = tape.add_scalar(p, spec.eps_log);
            let logp = tape.log(shifted);
            let plogp = tape.mul(p, logp)?;
            let per_sample = tape.sum_axis(plogp, 1)?;
            Ok(tape.mean(per_sample))
        }
    }
}

/// Regulariser of a `(B, C, N, N)` per-sample input-gradient node.
pub fn sfs_loss(tape: &mut Tape, grad: Var, spec: &RegularizerSpec) -> Result<Var> {
    if spec.kind == RegularizerKind::None {
        return contract_err("regularizer kind none has no loss; skip it");
    }
    let bins = gradient_bin_powers(tape, grad, spec.n)?;
    sfs_from_bin_powers(tape, bins, spec)
}

/// The recorded objective `CE + lambda * SFS` plus its parts.
#[derive(Debug, Clone)]
pub struct CombinedLoss {
    pub root: Var,
    pub params: Vec<Var>,
    pub logits: Var,
    pub ce: f64,
    /// Regulariser value; computed for diagnostics even when `lambda == 0`.
    pub sfs: Option<f64>,
}

/// Records `CE + lambda * SFS` for a batch. With `lambda == 0` the root is the
/// cross-entropy node itself, so parameter gradients equal plain training.
pub fn combined_loss(tape: &mut Tape, model: &Model, images: &Tensor, labels: &[usize], spec: &RegularizerSpec) -> Result<CombinedLoss> {
    let batch = images.shape()[0];
    let params = model.bind(tape);
    let x = if spec.kind == RegularizerKind::None {
        tape.constant(images.clone())
    } else {
        tape.leaf(images.clone())
    };
    let logits = model.forward(tape, x, &params)?;
    let ce = ce_loss(tape, logits, labels)?;
    let ce_value = tape.value(ce).item();
    if spec.kind == RegularizerKind::None {
        return Ok(CombinedLoss { root: ce, params, logits, ce: ce_value, sfs: None });
    }
    let gx = tape.grad(ce, &[x])?[0];
    // grad of the batch-mean loss is 1/B of each per-sample gradient
    let per_sample = tape.scale(gx, batch as f64);
    let sfs = sfs_loss(tape, per_sample, spec)?;
    let sfs_value = tape.value(sfs).item();
    let root = if spec.lambda == 0.0 {
        ce
    } else {
        let weighted = tape.scale(sfs, spec.lambda);
        tape.add(ce, weighted)?
    };
    Ok(CombinedLoss { root, params, logits, ce: ce_value, sfs: Some(sfs_value) })
}

/// Input augmentation applied to each training batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Augment {
    #[default]
    None,
    /// i.i.d. `N(0, sigma^2)` per pixel, clipped to `[0, 1]`.
    Gaussian { sigma: f64 },
    /// Replace the batch by PGD examples against the current parameters.
    Pgd(PgdConfig),
    /// Random translation by up to `pad` pixels (zero fill) and a horizontal flip with probability 1/2.
    CropFlip { pad: usize },
}

fn crop_flip(image: &[f64], n: usize, pad: usize, rng: &mut Xoshiro256PlusPlus) -> Vec<f64> {
    let p = pad as i64;
    let (dy, dx) = (rng.random_range(-p..=p), rng.random_range(-p..=p));
    let flip = rng.random_bool(0.5);
    let mut out = vec![0.0; image.len()];
    for (plane_out, plane_in) in out.chunks_mut(n * n).zip(image.chunks(n * n)) {
        for y in 0..n as i64 {
            for x in 0..n as i64 {
                let xs = if flip { n as i64 - 1 - x } else { x };
                let (sy, sx) = (y + dy, xs + dx);
                if (0..n as i64).contains(&sy) && (0..n as i64).contains(&sx) {
                    plane_out[(y * n as i64 + x) as usize] = plane_in[(sy * n as i64 + sx) as usize];
                }
            }
        }
    }
    out
}

/// Training loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Samples of the probe set used for per-epoch sensitivity logging.
    pub probe_samples: usize,
    pub augment: Augment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, seed: 0, probe_samples: 64, augment: Augment::None }
    }
}

fn augment_batch(model: &Model, x: Tensor, labels: &[usize], augment: &Augment, rng: &mut Xoshiro256PlusPlus) -> Result<Tensor> {
    match augment {
        Augment::None => Ok(x),
        Augment::Gaussian { sigma } => {
            let noisy = gaussian_noise(x.data(), *sigma, rng, true)?;
            Tensor::new(x.shape(), noisy)
        }
        Augment::Pgd(cfg) => Ok(pgd_l2(model, &x, labels, cfg, rng)?.x_adv),
        Augment::CropFlip { pad } => {
            let n = x.shape()[2];
            let per = x.numel() / x.shape()[0];
            let out = x.data().chunks(per).flat_map(|im| crop_flip(im, n, *pad, rng)).collect();
            Tensor::new(x.shape(), out)
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub sfs: f64,
    pub acc: f64,
    pub low_mass: f64,
    pub mid_mass: f64,
    pub high_mass: f64,
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Trains with SGD on `CE + lambda * SFS`, logging band masses of the current
/// sensitivity on a fixed probe set after each epoch.
pub fn train_regularized(
    mut model: Model,
    data: &Dataset,
    spec: &RegularizerSpec,
    optim: &mut OptimState,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<EpochLog>)> {
    if data.is_empty() {
        return value_err("cannot train on an empty dataset");
    }
    if spec.n != data.n() {
        return dim_err(format!("regularizer built for side {} but data has side {}", spec.n, data.n()));
    }
    let batch_size = cfg.batch_size.max(1);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let probe = data.take(cfg.probe_samples);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let (mut ce_sum, mut sfs_sum, mut correct) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(batch_size) {
            let (x, labels) = data.batch(chunk);
            let x = augment_batch(&model, x, &labels, &cfg.augment, &mut rng)?;
            let mut tape = Tape::new();
            let obj = combined_loss(&mut tape, &model, &x, &labels, spec)?;
            let root_value = tape.value(obj.root).item();
            if !root_value.is_finite() {
                return Err(Error::Divergence { epoch, detail: format!("non-finite loss {root_value}") });
            }
            correct += argmax_rows(tape.value(obj.logits)).iter().zip(&labels).filter(|(p, y)| p == y).count();
            ce_sum += obj.ce * chunk.len() as f64;
            sfs_sum += obj.sfs.unwrap_or(0.0) * chunk.len() as f64;

            let grads = tape.backward(obj.root, false)?;
            let grads: Vec<Tensor> = obj
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, detail: "non-finite gradient".into() });
            }
            sgd_step(model.params_mut(), &grads, optim)?;
            // ReLU can hide overflowed weights from the loss, so check them directly
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { epoch, detail: "non-finite parameters after the update".into() });
            }
        }
        let total = data.len() as f64;
        let (px, py) = probe.batch(&(0..probe.len()).collect::<Vec<_>>());
        if !probe.is_empty() && !input_gradients(&model, &px, &py)?.is_finite() {
            return Err(Error::Divergence { epoch, detail: "non-finite input gradient on the probe set".into() });
        }
        // all zero when every probe gradient is degenerate (e.g. all ReLUs dead)
        let (low_mass, mid_mass, high_mass) = match model_sensitivity(&model, &probe, probe.len(), 0, false) {
            Ok(rep) => band_masses(&rep.mean, data.n()),
            Err(Error::DegenerateSpectrum { .. }) => (0.0, 0.0, 0.0),
            Err(e) => return Err(e),
        };
        log.push(EpochLog {
            epoch,
            ce: ce_sum / total,
            sfs: sfs_sum / total,
            acc: correct as f64 / total,
            low_mass,
            mid_mass,
            high_mass,
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_flip_without_pad_is_identity_or_mirror() {
        let img: Vec<f64> = (0..32).map(|v| v as f64).collect();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let mirror: Vec<f64> = img.chunks(4).flat_map(|row| row.iter().rev().cloned()).collect();
        let mut seen = (false, false);
        for _ in 0..20 {
            let out = crop_flip(&img, 4, 0, &mut rng);
            assert!(out == img || out == mirror);
            seen = (seen.0 || out == img, seen.1 || out == mirror);
        }
        assert!(seen.0 && seen.1);
    }

    #[test]
    fn crop_flip_shift_zero_fills() {
        let img = vec![1.0; 16];
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        for _ in 0..20 {
            let out = crop_flip(&img, 4, 1, &mut rng);
            let ones = out.iter().filter(|&&v| v == 1.0).count();
            assert!([16, 12, 9].contains(&ones), "{ones}");
            assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    fn bins_value(spec: &RegularizerSpec, bins: Vec<f64>) -> f64 {
        let mut tape = Tape::new();
        let k = bins.len();
        let b = tape.leaf(Tensor::new(&[1, k], bins).unwrap());
        let l = sfs_from_bin_powers(&mut tape, b, spec).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn band_membership_at_32() {
        let mut bins = vec![0.0; n_bins(32)];
        bins[0] = 3.0;
        let v = |kind| bins_value(&RegularizerSpec::new(kind, 0.5, 32).unwrap(), bins.clone());
        assert!(v(RegularizerKind::Lsf).abs() < 1e-12);
        assert!((v(RegularizerKind::Hsf) - 1.0).abs() < 1e-12);
        assert!((v(RegularizerKind::Msf) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn asf_minimum_is_minus_log_half_n() {
        let mut bins = vec![0.0; n_bins(32)];
        for b in bins.iter_mut().take(16) {
            *b = 0.7;
        }
        // outside the inscribed circle: ignored
        bins[20] = 5.0;
        let v = bins_value(&RegularizerSpec::new(RegularizerKind::Asf, 0.5, 32).unwrap(), bins);
        assert!((v + 16f64.ln()).abs() < 1e-9, "{v}");
    }

    #[test]
    fn none_kind_is_contract_error() {
        let mut tape = Tape::new();
        let b = tape.leaf(Tensor::zeros(&[1, n_bins(8)]));
        assert!(matches!(sfs_from_bin_powers(&mut tape, b, &RegularizerSpec::none(8)), Err(Error::Contract(_))));
    }

    #[test]
    fn boundary_radii_are_not_penalized() {
        // n = 12: N/6 = 2, N/3 = 4
        let lsf = RegularizerSpec::new(RegularizerKind::Lsf, 1.0, 12).unwrap();
        let hsf = RegularizerSpec::new(RegularizerKind::Hsf, 1.0, 12).unwrap();
        let msf = RegularizerSpec::new(RegularizerKind::Msf, 1.0, 12).unwrap();
        assert!(!lsf.penalizes(2) && lsf.penalizes(3));
        assert!(!hsf.penalizes(4) && hsf.penalizes(3));
        assert!(msf.penalizes(1) && !msf.penalizes(2) && !msf.penalizes(4) && msf.penalizes(5));
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("LSF".parse::<RegularizerKind>().unwrap(), RegularizerKind::Lsf);
        assert!("xsf".parse::<RegularizerKind>().is_err());
        assert!(RegularizerSpec::new(RegularizerKind::Lsf, -1.0, 8).is_err());
    }
}
