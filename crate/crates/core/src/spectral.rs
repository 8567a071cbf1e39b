//! Unitary 2D DFT, zero-shifting, power matrices and radial binning.
//!
//! All transforms use the unitary convention: a factor `1/n` per 2D transform
//! on an `n x n` grid, so forward and inverse are adjoint and norm-preserving.
//! Square, even side lengths only. After [`fftshift`] the DC coefficient sits
//! at `(n/2, n/2)`.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{contract_err, dim_err, value_err, Error, Result};

/// Smallest non-DC power accepted by the analysis path.
pub const EPS_DIV: f64 = 1e-12;

/// Tolerance on the imaginary residue when a real image is requested.
pub const REAL_RESIDUE_TOL: f64 = 1e-6;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Checks the side length shared by every spectral operation.
pub fn check_side(n: usize) -> Result<()> {
    if n < 2 || n % 2 != 0 {
        return dim_err(format!("side length must be even and >= 2, got {n}"));
    }
    Ok(())
}

/// In-place unitary 2D transform of a row-major `n x n` complex grid.
///
/// Rows are transformed, then columns, then the whole grid is scaled by `1/n`.
pub fn dft2_in_place(data: &mut [Complex64], n: usize, inverse: bool) {
    debug_assert_eq!(data.len(), n * n);
    let fft = plan(n, inverse);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    fft.process_with_scratch(data, &mut scratch);

    let mut column = vec![Complex64::default(); n];
    for c in 0..n {
        for r in 0..n {
            column[r] = data[r * n + c];
        }
        fft.process_with_scratch(&mut column, &mut scratch);
        for r in 0..n {
            data[r * n + c] = column[r];
        }
    }
    let scale = 1.0 / n as f64;
    for z in data.iter_mut() {
        *z *= scale;
    }
}

/// An `n x n` complex spectrum, either in natural (DC at `(0,0)`) or
/// zero-shifted (DC at `(n/2, n/2)`) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    data: Vec<Complex64>,
    n: usize,
    shifted: bool,
}

impl Spectrum {
    pub fn new(data: Vec<Complex64>, n: usize, shifted: bool) -> Result<Self> {
        check_side(n)?;
        if data.len() != n * n {
            return dim_err(format!("spectrum of side {n} needs {} values, got {}", n * n, data.len()));
        }
        Ok(Self { data, n, shifted })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_shifted(&self) -> bool {
        self.shifted
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn get(&self, u: usize, v: usize) -> Complex64 {
        self.data[u * self.n + v]
    }

    /// Sum of squared moduli.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Index of the DC coefficient for the current layout.
    pub fn dc_index(&self) -> (usize, usize) {
        if self.shifted {
            (self.n / 2, self.n / 2)
        } else {
            (0, 0)
        }
    }
}

/// Unitary forward DFT of a real square image (row-major).
pub fn dft2_unitary(image: &[f64], shape: (usize, usize)) -> Result<Spectrum> {
    let (rows, cols) = shape;
    if rows != cols {
        return dim_err(format!("image must be square, got {rows}x{cols}"));
    }
    let n = rows;
    check_side(n)?;
    if image.len() != n * n {
        return dim_err(format!("image of shape {n}x{n} needs {} values, got {}", n * n, image.len()));
    }
    if let Some(bad) = image.iter().position(|x| !x.is_finite()) {
        return value_err(format!("non-finite pixel at index {bad}"));
    }
    let mut data: Vec<Complex64> = image.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    dft2_in_place(&mut data, n, false);
    Spectrum::new(data, n, false)
}

/// Unitary inverse DFT. The spectrum must be in natural layout.
pub fn idft2_unitary(spec: &Spectrum) -> Result<Vec<Complex64>> {
    if spec.shifted {
        return contract_err("idft2_unitary expects an unshifted spectrum; call ifftshift first");
    }
    let mut data = spec.data.clone();
    dft2_in_place(&mut data, spec.n, true);
    Ok(data)
}

/// Inverse DFT returning the real part, failing when the imaginary residue
/// shows the spectrum was not Hermitian-symmetric.
pub fn idft2_real(spec: &Spectrum) -> Result<Vec<f64>> {
    let out = idft2_unitary(spec)?;
    let scale = out.iter().map(|z| z.re.abs()).fold(1.0_f64, f64::max);
    let residue = out.iter().map(|z| z.im.abs()).fold(0.0_f64, f64::max);
    if residue > REAL_RESIDUE_TOL * scale {
        return value_err(format!(
            "inverse transform has imaginary residue {residue:e}; spectrum is not Hermitian-symmetric"
        ));
    }
    Ok(out.into_iter().map(|z| z.re).collect())
}

fn roll_half(spec: &Spectrum) -> Spectrum {
    let n = spec.n;
    let h = n / 2;
    let mut data = vec![Complex64::default(); n * n];
    for u in 0..n {
        for v in 0..n {
            data[((u + h) % n) * n + (v + h) % n] = spec.data[u * n + v];
        }
    }
    Spectrum { data, n, shifted: !spec.shifted }
}

/// Moves DC from `(0,0)` to `(n/2, n/2)`. For even `n` this is an involution.
pub fn fftshift(spec: &Spectrum) -> Spectrum {
    roll_half(spec)
}

/// Inverse of [`fftshift`]; identical permutation for even `n`.
pub fn ifftshift(spec: &Spectrum) -> Spectrum {
    roll_half(spec)
}

/// Entrywise squared modulus of a shifted spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerMatrix {
    p: Vec<f64>,
    n: usize,
}

impl PowerMatrix {
    /// Wraps an existing shifted-layout power matrix.
    pub fn from_values(p: Vec<f64>, n: usize) -> Result<Self> {
        check_side(n)?;
        if p.len() != n * n {
            return dim_err(format!("power matrix of side {n} needs {} values, got {}", n * n, p.len()));
        }
        if p.iter().any(|&x| !(x >= 0.0)) {
            return value_err("power entries must be finite and non-negative");
        }
        Ok(Self { p, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.p[u * self.n + v]
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }
}

pub fn power_matrix(spec: &Spectrum) -> Result<PowerMatrix> {
    if !spec.shifted {
        return contract_err("power_matrix expects a shifted spectrum");
    }
    let p = spec.data.iter().map(|z| z.re * z.re + z.im * z.im).collect();
    Ok(PowerMatrix { p, n: spec.n })
}

/// Rounded radial distance of every cell of a shifted `n x n` grid from its centre.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialIndexMap {
    n: usize,
    radius_of: Vec<usize>,
    counts: Vec<usize>,
}

impl RadialIndexMap {
    pub fn new(n: usize) -> Result<Self> {
        check_side(n)?;
        let c = (n / 2) as f64;
        let radius_of: Vec<usize> = (0..n * n)
            .map(|i| {
                let du = (i / n) as f64 - c;
                let dv = (i % n) as f64 - c;
                // f64::round rounds half away from zero.
                (du * du + dv * dv).sqrt().round() as usize
            })
            .collect();
        let max_r = radius_of.iter().copied().max().unwrap_or(0);
        let mut counts = vec![0; max_r + 1];
        for &r in &radius_of {
            counts[r] += 1;
        }
        Ok(Self { n, radius_of, counts })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn center(&self) -> (usize, usize) {
        (self.n / 2, self.n / 2)
    }

    /// Rounded radius of shifted cell `(u, v)`.
    pub fn radius(&self, u: usize, v: usize) -> usize {
        self.radius_of[u * self.n + v]
    }

    pub fn radii(&self) -> &[usize] {
        &self.radius_of
    }

    /// Number of cells per rounded radius, indexed from 0 (DC).
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Number of profile bins, `floor(n / sqrt 2)`.
    pub fn n_bins(&self) -> usize {
        n_bins(self.n)
    }

    /// Profile bin (1-based) of a cell, or `None` for DC. Corner cells whose
    /// rounded radius exceeds the bin count land in the top bin.
    pub fn bin(&self, cell: usize) -> Option<usize> {
        match self.radius_of[cell] {
            0 => None,
            r => Some(r.min(self.n_bins())),
        }
    }

    /// Per-bin cell counts, index `k - 1` for bin `k`.
    pub fn bin_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_bins()];
        for cell in 0..self.n * self.n {
            if let Some(k) = self.bin(cell) {
                out[k - 1] += 1;
            }
        }
        out
    }
}

/// Number of radial profile bins for side length `n`.
pub fn n_bins(n: usize) -> usize {
    (n as f64 / std::f64::consts::SQRT_2).floor() as usize
}

/// Which power total a profile is normalised by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Normalization {
    /// All non-DC power (`P_k`).
    Full,
    /// Non-DC power inside the inscribed circle, radius `<= n/2` (`P~_k`).
    Inscribed,
}

/// Per-radius power fractions. `values[k - 1]` holds bin `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialProfile {
    values: Vec<f64>,
    normalization: Normalization,
}

impl RadialProfile {
    pub fn new(values: Vec<f64>, normalization: Normalization) -> Self {
        Self { values, normalization }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value of bin `k` (1-based).
    pub fn at(&self, k: usize) -> f64 {
        self.values[k - 1]
    }

    /// Sum over bins `k` with `lo <= k <= hi` (inclusive, 1-based, clamped).
    pub fn mass(&self, lo: usize, hi: usize) -> f64 {
        let lo = lo.max(1);
        let hi = hi.min(self.values.len());
        if lo > hi {
            return 0.0;
        }
        self.values[lo - 1..hi].iter().sum()
    }

    /// Shannon entropy (natural log) over the bins that carry the normalisation,
    /// using `0 log 0 = 0`.
    pub fn entropy(&self, n: usize) -> f64 {
        let top = match self.normalization {
            Normalization::Full => self.values.len(),
            Normalization::Inscribed => (n / 2).min(self.values.len()),
        };
        -self.values[..top].iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }
}

/// Sum of power per profile bin (index `k - 1`), DC excluded.
pub fn bin_powers(p: &PowerMatrix, map: &RadialIndexMap) -> Result<Vec<f64>> {
    if p.n != map.n {
        return dim_err(format!("power matrix side {} does not match radial map side {}", p.n, map.n));
    }
    let mut sums = vec![0.0; map.n_bins()];
    for (cell, &v) in p.p.iter().enumerate() {
        if let Some(k) = map.bin(cell) {
            sums[k - 1] += v;
        }
    }
    Ok(sums)
}

/// Normalised radial profile of a power matrix.
pub fn radial_profile(p: &PowerMatrix, map: &RadialIndexMap, normalization: Normalization) -> Result<RadialProfile> {
    let sums = bin_powers(p, map)?;
    let top = match normalization {
        Normalization::Full => sums.len(),
        Normalization::Inscribed => (p.n / 2).min(sums.len()),
    };
    let total: f64 = sums[..top].iter().sum();
    if !(total > EPS_DIV) {
        return Err(Error::DegenerateSpectrum { power: total, threshold: EPS_DIV });
    }
    let values = sums.into_iter().map(|s| s / total).collect();
    Ok(RadialProfile { values, normalization })
}

/// Convenience: real image -> shifted power matrix.
pub fn image_power(image: &[f64], n: usize) -> Result<PowerMatrix> {
    let spec = dft2_unitary(image, (n, n))?;
    power_matrix(&fftshift(&spec))
}
