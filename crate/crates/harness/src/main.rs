use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use freqsense::corruptions::perturbation_spectrum;
use freqsense::spectral::n_bins;
use freqsense_harness::config::{DatasetSource, ExperimentConfig, PgdEvalSection};
use freqsense_harness::error::{HarnessError, Result};
use freqsense_harness::experiment::{
    filter_stage, heatmap_stage, load_checkpoint, load_datasets, output_dir, patch_stage, pgd_stage, run_experiment,
    sensitivity_stage, train_stage, train_table, write_manifest, CHECKPOINT_FILE,
};
use freqsense_harness::export::{export_csv, export_pgm, Table};
use freqsense_harness::synth::gen_synthetic_freq_dataset;

/// Fourier-sensitivity experiments on small image classifiers.
#[derive(Parser, Debug)]
#[command(name = "freqsense", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for evaluation loops.
    #[arg(long, global = true, value_name = "K")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset and write a preview montage and per-class spectra.
    GenSynth,
    /// Train and write checkpoint, train.csv and manifest.
    Train,
    /// Run training and every configured evaluation.
    Run,
    /// Fourier-sensitivity of a saved checkpoint.
    Sensitivity(CheckpointArg),
    /// Fourier-noise heat maps of a saved checkpoint.
    Heatmap {
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Noise l2 norms; replaces the configured list.
        #[arg(long = "epsilon", value_name = "EPS")]
        epsilons: Vec<f64>,
        /// Draws per frequency.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Accuracy under low-pass filtering of a saved checkpoint.
    FilterEval {
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Filter radii; replaces the configured list.
        #[arg(long = "radius", value_name = "R")]
        radii: Vec<f64>,
    },
    /// Accuracy under patch shuffling of a saved checkpoint.
    PatchEval {
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Grid sizes; replaces the configured list.
        #[arg(long = "k", value_name = "K")]
        ks: Vec<usize>,
    },
    /// Radial spectrum of PGD-l2 perturbations against a saved checkpoint.
    AttackSpectrum {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct CheckpointArg {
    /// Checkpoint to evaluate; defaults to checkpoint.bin in the output directory.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let path = g.config.as_ref().ok_or_else(|| HarnessError::Usage("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.output_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_path(arg: &CheckpointArg, out: &Path) -> PathBuf {
    arg.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(k) = cli.global.threads {
        if k == 0 {
            return Err(HarnessError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| HarnessError::Usage(format!("cannot size the worker pool: {e}")))?;
    }
    let mut cfg = load_config(&cli.global)?;
    let out = output_dir(&cfg)?;
    std::fs::create_dir_all(&out)?;

    match cli.command {
        Command::GenSynth => return gen_synth(&cfg, &out),
        Command::Run => {
            let s = run_experiment(&cfg)?;
            println!("test accuracy {:.4}, artifacts in {}", s.test_accuracy, s.out_dir.display());
            return Ok(());
        }
        Command::Train => {
            let data = load_datasets(&cfg)?;
            let (model, log) = train_stage(&cfg, &data.train)?;
            std::fs::write(out.join(CHECKPOINT_FILE), model.to_checkpoint())?;
            export_csv(&train_table(&log), &out.join("train.csv"))?;
            write_manifest(&cfg, &out)?;
            return Ok(());
        }
        _ => {}
    }

    let data = load_datasets(&cfg)?;
    match cli.command {
        Command::Sensitivity(ckpt) => {
            let model = load_checkpoint(&checkpoint_path(&ckpt, &out))?;
            let r = sensitivity_stage(&model, &data.test, &cfg, &out)?;
            println!("low-band mass {:.4} over {} samples", r.low_mass(data.test.n()), r.n_samples);
        }
        Command::Heatmap { ckpt, epsilons, samples } => {
            let model = load_checkpoint(&checkpoint_path(&ckpt, &out))?;
            if !epsilons.is_empty() {
                cfg.eval.noise_epsilons = epsilons;
            }
            if let Some(s) = samples {
                cfg.eval.heatmap_samples = s;
            }
            if cfg.eval.noise_epsilons.is_empty() {
                return Err(HarnessError::Usage("no fourier-noise epsilon given".into()));
            }
            heatmap_stage(&model, &data.test, &cfg.eval, cfg.seed, &out)?;
        }
        Command::FilterEval { ckpt, radii } => {
            let model = load_checkpoint(&checkpoint_path(&ckpt, &out))?;
            let radii = if radii.is_empty() { cfg.eval.filter_radii.clone() } else { radii };
            for (r, a) in filter_stage(&model, &data.test, &radii, &out)? {
                println!("r={r}: accuracy {a:.4}");
            }
        }
        Command::PatchEval { ckpt, ks } => {
            let model = load_checkpoint(&checkpoint_path(&ckpt, &out))?;
            let ks = if ks.is_empty() { cfg.eval.patch_ks.clone() } else { ks };
            for (k, a) in patch_stage(&model, &data.test, &ks, cfg.seed, &out)? {
                println!("k={k}: accuracy {a:.4}");
            }
        }
        Command::AttackSpectrum { ckpt, epsilon, steps, samples } => {
            let model = load_checkpoint(&checkpoint_path(&ckpt, &out))?;
            let mut pgd = cfg.eval.pgd.clone().unwrap_or(PgdEvalSection {
                epsilon: 1.0,
                steps: 7,
                step_size: None,
                random_start: false,
                samples: 64,
            });
            if let Some(e) = epsilon {
                pgd.epsilon = e;
            }
            if let Some(s) = steps {
                pgd.steps = s;
            }
            if let Some(s) = samples {
                pgd.samples = s;
            }
            let r = pgd_stage(&model, &data.test, &pgd, cfg.seed, &out)?;
            println!("low-band power fraction {:.4}, adversarial accuracy {:.4}", r.low_mass, r.adversarial_accuracy);
        }
        Command::GenSynth | Command::Train | Command::Run => unreachable!("handled above"),
    }
    Ok(())
}

/// Montage of up to 8 images per class (one class per row) and the mean
/// radial power profile of each class's images.
fn gen_synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let DatasetSource::Synthetic { train, .. } = &cfg.dataset else {
        return Err(HarnessError::Config("gen-synth needs a synthetic dataset source".into()));
    };
    let data = gen_synthetic_freq_dataset(train)?;
    let (c, n, classes) = (data.channels(), data.n(), data.classes());
    const PER_ROW: usize = 8;
    let mut montage = vec![0.0; classes * n * PER_ROW * n];
    let width = PER_ROW * n;
    let mut profiles = vec![vec![0.0; n_bins(n)]; classes];
    let mut counts = vec![0usize; classes];
    for i in 0..data.len() {
        let (label, image) = (data.label(i), data.image(i));
        if counts[label] < PER_ROW {
            let col = counts[label];
            for y in 0..n {
                for x in 0..n {
                    let v: f64 = (0..c).map(|ch| image[ch * n * n + y * n + x]).sum::<f64>() / c as f64;
                    montage[(label * n + y) * width + col * n + x] = v;
                }
            }
        }
        let p = perturbation_spectrum(image, c, n)?;
        profiles[label].iter_mut().zip(p.values()).for_each(|(a, v)| *a += v);
        counts[label] += 1;
    }
    export_pgm(&montage, classes * n, width, &out.join("synth_preview.pgm"))?;
    let mut t = Table::new(&["class", "k", "power_fraction"]);
    for (label, prof) in profiles.iter().enumerate() {
        for (k, v) in prof.iter().enumerate() {
            t.push(vec![label.into(), (k + 1).into(), (v / counts[label].max(1) as f64).into()]);
        }
    }
    export_csv(&t, &out.join("synth_spectrum.csv"))?;
    println!("{} images, {classes} classes, side {n}", data.len());
    Ok(())
}
