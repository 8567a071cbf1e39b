use freqsense::autodiff::Tape;
use freqsense::data::Dataset;
use freqsense::fourier_reg::{
    combined_loss, sfs_loss, train_regularized, RegularizerKind, RegularizerSpec, TrainConfig,
};
use freqsense::nn::{build_model, Model, ModelConfig, OptimState};
use freqsense::sensitivity::input_gradients;
use freqsense::spectral::{bin_powers, fftshift, n_bins, power_matrix, dft2_unitary, RadialIndexMap};
use freqsense::Tensor;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const KINDS: [RegularizerKind; 4] = [RegularizerKind::Lsf, RegularizerKind::Msf, RegularizerKind::Hsf, RegularizerKind::Asf];

fn random_batch(rng: &mut Xoshiro256PlusPlus, b: usize, c: usize, n: usize) -> Tensor {
    Tensor::new(&[b, c, n, n], (0..b * c * n * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

/// Regulariser value from per-sample gradients, using only the spectral API.
fn sfs_oracle(model: &Model, x: &Tensor, labels: &[usize], spec: &RegularizerSpec) -> f64 {
    let s = x.shape();
    let (b, c, n) = (s[0], s[1], s[2]);
    let g = input_gradients(model, x, labels).unwrap();
    let map = RadialIndexMap::new(n).unwrap();
    let mut acc = 0.0;
    for i in 0..b {
        let chunk = &g.data()[i * c * n * n..(i + 1) * c * n * n];
        let mean: Vec<f64> = (0..n * n).map(|p| (0..c).map(|ch| chunk[ch * n * n + p]).sum::<f64>() / c as f64).collect();
        let p = power_matrix(&fftshift(&dft2_unitary(&mean, (n, n)).unwrap())).unwrap();
        let bins = bin_powers(&p, &map).unwrap();
        let nf = n as f64;
        acc += match spec.kind {
            RegularizerKind::Asf => {
                let inside = &bins[..n / 2];
                let t: f64 = inside.iter().sum();
                inside.iter().map(|v| v / (t + 1e-12)).map(|q| q * (q + 1e-12).ln()).sum::<f64>()
            }
            kind => {
                let total: f64 = bins.iter().sum();
                let pen: f64 = bins
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| {
                        let k = (j + 1) as f64;
                        match kind {
                            RegularizerKind::Lsf => k > nf / 6.0,
                            RegularizerKind::Msf => k < nf / 6.0 || k > nf / 3.0,
                            _ => k < nf / 3.0,
                        }
                    })
                    .map(|(_, v)| v)
                    .sum();
                pen / (total + 1e-12)
            }
        };
    }
    acc / b as f64
}

#[test]
fn tape_regularizer_matches_spectral_oracle() {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
    for (i, kind) in KINDS.into_iter().enumerate() {
        for arch in 0..2 {
            let cfg = if arch == 0 {
                ModelConfig::mlp(2, 8, 3, &[12], 10 + i as u64)
            } else {
                ModelConfig::cnn_small(2, 8, 3, [3, 3, 3], 20 + i as u64)
            };
            let model = build_model(cfg).unwrap();
            let x = random_batch(&mut rng, 4, 2, 8);
            let labels = [0, 1, 2, 1];
            let spec = RegularizerSpec::new(kind, 0.5, 8).unwrap();
            let mut tape = Tape::new();
            let obj = combined_loss(&mut tape, &model, &x, &labels, &spec).unwrap();
            let want = sfs_oracle(&model, &x, &labels, &spec);
            let got = obj.sfs.unwrap();
            assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{kind} arch {arch}: {got} vs {want}");
        }
    }
}

fn objective(model: &Model, x: &Tensor, labels: &[usize], spec: &RegularizerSpec) -> f64 {
    let mut tape = Tape::new();
    let obj = combined_loss(&mut tape, model, x, labels, spec).unwrap();
    tape.value(obj.root).item()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let n = 8;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
    for (i, kind) in KINDS.into_iter().enumerate() {
        for cfg in [ModelConfig::mlp(1, n, 3, &[10], 30 + i as u64), ModelConfig::cnn_small(1, n, 3, [2, 3, 3], 40 + i as u64)] {
            let model = build_model(cfg).unwrap();
            let x = random_batch(&mut rng, 3, 1, n);
            let labels = [2, 0, 1];
            let spec = RegularizerSpec::new(kind, 0.5, n).unwrap();
            let mut tape = Tape::new();
            let obj = combined_loss(&mut tape, &model, &x, &labels, &spec).unwrap();
            let grads = tape.backward(obj.root, false).unwrap();
            let analytic: Vec<f64> =
                obj.params.iter().flat_map(|&v| grads.get(v).unwrap().data().to_vec()).collect();

            let h = 1e-6;
            let mut fd = Vec::with_capacity(analytic.len());
            let mut probe = model.clone();
            for p in 0..model.params().len() {
                for j in 0..model.params()[p].numel() {
                    let orig = model.params()[p].data()[j];
                    probe.params_mut()[p].data_mut()[j] = orig + h;
                    let up = objective(&probe, &x, &labels, &spec);
                    probe.params_mut()[p].data_mut()[j] = orig - h;
                    let down = objective(&probe, &x, &labels, &spec);
                    probe.params_mut()[p].data_mut()[j] = orig;
                    fd.push((up - down) / (2.0 * h));
                }
            }
            let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
            let worst = analytic.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(worst / scale <= 1e-3, "{kind} {:?}: rel err {}", model.config().arch, worst / scale);
        }
    }
}

#[test]
fn sfs_loss_rejects_bad_shapes() {
    let mut tape = Tape::new();
    let g = tape.leaf(Tensor::zeros(&[2, 1, 8, 4]));
    let spec = RegularizerSpec::new(RegularizerKind::Lsf, 1.0, 8).unwrap();
    assert!(sfs_loss(&mut tape, g, &spec).is_err());
}

#[test]
fn penalized_sets_follow_band_thresholds() {
    for n in (2..=64).step_by(2) {
        let nf = n as f64;
        for k in 1..=n_bins(n) {
            let kf = k as f64;
            let lsf = RegularizerSpec::new(RegularizerKind::Lsf, 1.0, n).unwrap();
            let msf = RegularizerSpec::new(RegularizerKind::Msf, 1.0, n).unwrap();
            let hsf = RegularizerSpec::new(RegularizerKind::Hsf, 1.0, n).unwrap();
            assert_eq!(lsf.penalizes(k), kf > nf / 6.0, "n={n} k={k}");
            assert_eq!(msf.penalizes(k), kf < nf / 6.0 || kf > nf / 3.0, "n={n} k={k}");
            assert_eq!(hsf.penalizes(k), kf < nf / 3.0, "n={n} k={k}");
            // every radius is kept by at least one of the three; overlaps only on the boundaries
            let kept = [!lsf.penalizes(k), !msf.penalizes(k), !hsf.penalizes(k)];
            let count = kept.iter().filter(|&&b| b).count();
            assert!(count >= 1);
            if count > 1 {
                assert!(6 * k == n || 3 * k == n, "n={n} k={k}");
            }
        }
    }
}

fn toy_dataset(n: usize, len: usize, seed: u64) -> Dataset {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut d = Dataset::new(1, n, 2);
    for i in 0..len {
        let label = i % 2;
        let img = (0..n * n)
            .map(|p| {
                let stripe = if label == 0 { (p / n) % 2 } else { (p % n) % 2 } as f64;
                0.5 * stripe + 0.25 * rng.random_range(0.0..1.0)
            })
            .collect();
        d.push(img, label).unwrap();
    }
    d
}

fn param_bits(m: &Model) -> Vec<u64> {
    m.params().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn zero_lambda_reproduces_plain_training_bitwise() {
    let data = toy_dataset(8, 24, 3);
    let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 11, probe_samples: 8, ..Default::default() };
    let fresh = || build_model(ModelConfig::cnn_small(1, 8, 2, [2, 3, 3], 5)).unwrap();
    let (base, base_log) =
        train_regularized(fresh(), &data, &RegularizerSpec::none(8), &mut OptimState::new(0.05, 0.9, 1e-4), &cfg).unwrap();
    for kind in KINDS {
        let spec = RegularizerSpec::new(kind, 0.0, 8).unwrap();
        let (m, log) = train_regularized(fresh(), &data, &spec, &mut OptimState::new(0.05, 0.9, 1e-4), &cfg).unwrap();
        assert_eq!(param_bits(&m), param_bits(&base), "{kind}");
        for (a, b) in log.iter().zip(&base_log) {
            assert_eq!(a.ce.to_bits(), b.ce.to_bits());
            assert_eq!(a.acc, b.acc);
        }
        // the regulariser is still reported for diagnostics
        assert!(log.iter().all(|e| e.sfs.is_finite()));
    }
}

#[test]
fn regularized_training_lowers_the_penalty_and_logs_each_epoch() {
    let data = toy_dataset(8, 32, 4);
    let cfg = TrainConfig { epochs: 4, batch_size: 8, seed: 1, probe_samples: 16, ..Default::default() };
    let model = build_model(ModelConfig::mlp(1, 8, 2, &[16], 6)).unwrap();
    let spec = RegularizerSpec::new(RegularizerKind::Lsf, 1.0, 8).unwrap();
    let (_, log) = train_regularized(model, &data, &spec, &mut OptimState::new(0.05, 0.9, 0.0), &cfg).unwrap();
    assert_eq!(log.len(), 4);
    assert_eq!(log.iter().map(|e| e.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(log[3].sfs < log[0].sfs, "{log:?}");
    for e in &log {
        assert!((e.low_mass + e.mid_mass + e.high_mass - 1.0).abs() < 1e-9);
    }
}

#[test]
fn divergence_is_reported() {
    let data = toy_dataset(8, 16, 5);
    let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 1, probe_samples: 4, ..Default::default() };
    let model = build_model(ModelConfig::mlp(1, 8, 2, &[16], 7)).unwrap();
    let res = train_regularized(model, &data, &RegularizerSpec::none(8), &mut OptimState::new(1e200, 0.0, 0.0), &cfg);
    assert!(matches!(res, Err(freqsense::Error::Divergence { .. })), "{res:?}");
}

#[test]
fn augmented_training_is_seeded_and_changes_the_run() {
    use freqsense::corruptions::PgdConfig;
    use freqsense::fourier_reg::Augment;
    let data = toy_dataset(8, 16, 6);
    let fresh = || build_model(ModelConfig::mlp(1, 8, 2, &[8], 3)).unwrap();
    let run = |augment| {
        let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 4, probe_samples: 4, augment };
        param_bits(&train_regularized(fresh(), &data, &RegularizerSpec::none(8), &mut OptimState::new(0.05, 0.9, 0.0), &cfg).unwrap().0)
    };
    let plain = run(Augment::None);
    for aug in [Augment::Gaussian { sigma: 0.1 }, Augment::Pgd(PgdConfig::standard(0.5, 3)), Augment::CropFlip { pad: 1 }] {
        let a = run(aug);
        assert_eq!(a, run(aug), "{aug:?}");
        assert_ne!(a, plain, "{aug:?}");
    }
}
