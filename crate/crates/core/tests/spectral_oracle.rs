use std::f64::consts::PI;

use freqsense::spectral::{
    dft2_unitary, fftshift, idft2_real, idft2_unitary, ifftshift, power_matrix, radial_profile, Normalization,
    PowerMatrix, RadialIndexMap,
};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// O(N^4) unitary DFT straight from the definition.
fn naive_dft2(x: &[f64], n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); n * n];
    for u in 0..n {
        for v in 0..n {
            let mut acc = Complex64::default();
            for a in 0..n {
                for b in 0..n {
                    let phase = -2.0 * PI * ((u * a + v * b) as f64) / n as f64;
                    acc += x[a * n + b] * Complex64::from_polar(1.0, phase);
                }
            }
            out[u * n + v] = acc / n as f64;
        }
    }
    out
}

fn random_image(rng: &mut Xoshiro256PlusPlus, n: usize) -> Vec<f64> {
    (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn fft_matches_naive_dft_up_to_32() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
    for n in [2, 4, 6, 8, 16, 32] {
        for _ in 0..3 {
            let img = random_image(&mut rng, n);
            let fast = dft2_unitary(&img, (n, n)).unwrap();
            let slow = naive_dft2(&img, n);
            let err = fast.data().iter().zip(&slow).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err <= 1e-6, "n={n}: max abs err {err:e}");
        }
    }
}

#[test]
fn parseval_over_many_trials() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
    for trial in 0..1000 {
        let n = [4, 8, 16, 32][trial % 4];
        let img = random_image(&mut rng, n);
        let spatial: f64 = img.iter().map(|x| x * x).sum();
        let spectral = dft2_unitary(&img, (n, n)).unwrap().energy();
        assert!((spatial - spectral).abs() <= 1e-6 * spatial, "trial {trial}");
    }
}

#[test]
fn round_trip_and_hermitian_symmetry() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
    let n = 16;
    let img = random_image(&mut rng, n);
    let spec = dft2_unitary(&img, (n, n)).unwrap();
    for u in 0..n {
        for v in 0..n {
            let z = spec.get(u, v);
            let partner = spec.get((n - u) % n, (n - v) % n).conj();
            assert!((z - partner).norm() <= 1e-6 * z.norm().max(1.0));
        }
    }
    let back = idft2_unitary(&spec).unwrap();
    let err = back.iter().zip(&img).map(|(z, x)| (z.re - x).abs().max(z.im.abs())).fold(0.0, f64::max);
    assert!(err <= 1e-6);
    let real = idft2_real(&spec).unwrap();
    assert!(real.iter().zip(&img).all(|(a, b)| (a - b).abs() <= 1e-6));
}

#[test]
fn linearity() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
    for _ in 0..50 {
        let x = random_image(&mut rng, 8);
        let y = random_image(&mut rng, 8);
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fm = dft2_unitary(&mix, (8, 8)).unwrap();
        let fx = dft2_unitary(&x, (8, 8)).unwrap();
        let fy = dft2_unitary(&y, (8, 8)).unwrap();
        for i in 0..64 {
            let want = fx.data()[i] * a + fy.data()[i] * b;
            assert!((fm.data()[i] - want).norm() <= 1e-6);
        }
    }
}

#[test]
fn shift_is_a_permutation_and_involution() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    let img = random_image(&mut rng, 8);
    let spec = dft2_unitary(&img, (8, 8)).unwrap();
    let shifted = fftshift(&spec);
    assert_eq!(ifftshift(&shifted), spec);
    assert_eq!(fftshift(&shifted), spec);
    let p = power_matrix(&shifted).unwrap();
    let mut a: Vec<f64> = p.values().to_vec();
    let mut b: Vec<f64> = spec.data().iter().map(|z| z.re * z.re + z.im * z.im).collect();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    assert_eq!(a, b);
}

#[test]
fn power_matrix_matches_naive_oracle_and_is_centrosymmetric() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(6);
    let n = 8;
    let img = random_image(&mut rng, n);
    let p = power_matrix(&fftshift(&dft2_unitary(&img, (n, n)).unwrap())).unwrap();
    let naive = naive_dft2(&img, n);
    for u in 0..n {
        for v in 0..n {
            // shifted (u, v) holds natural ((u + n/2) mod n, (v + n/2) mod n)
            let z = naive[((u + n / 2) % n) * n + (v + n / 2) % n];
            assert!((p.get(u, v) - z.norm_sqr()).abs() <= 1e-6);
            if u > 0 && v > 0 {
                assert!((p.get(u, v) - p.get(n - u, n - v)).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn uniform_power_profile_matches_enumeration() {
    let n = 8;
    // Independent enumeration of rounded radii from the definition.
    let n_bins = (n as f64 / 2f64.sqrt()).floor() as usize;
    let mut counts = vec![0usize; n_bins + 1];
    for u in 0..n {
        for v in 0..n {
            let d = (((u as f64 - 4.0).powi(2) + (v as f64 - 4.0).powi(2)) as f64).sqrt();
            let r = (d + 0.5).floor() as usize;
            if r > 0 {
                counts[r.min(n_bins)] += 1;
            }
        }
    }
    let map = RadialIndexMap::new(n).unwrap();
    let p = PowerMatrix::from_values(vec![1.0; n * n], n).unwrap();
    let prof = radial_profile(&p, &map, Normalization::Full).unwrap();
    for k in 1..=n_bins {
        assert!((prof.at(k) - counts[k] as f64 / 63.0).abs() < 1e-12, "k={k}");
    }
}

proptest! {
    #[test]
    fn full_profile_sums_to_one(seed in any::<u64>(), which in 0usize..4) {
        let n = [4, 8, 16, 32][which];
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let img = random_image(&mut rng, n);
        let p = power_matrix(&fftshift(&dft2_unitary(&img, (n, n)).unwrap())).unwrap();
        let map = RadialIndexMap::new(n).unwrap();
        let full = radial_profile(&p, &map, Normalization::Full).unwrap();
        prop_assert!((full.values().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(full.values().iter().all(|&v| v >= 0.0));
        let ins = radial_profile(&p, &map, Normalization::Inscribed).unwrap();
        prop_assert!((ins.mass(1, n / 2) - 1.0).abs() <= 1e-6);
    }
}
