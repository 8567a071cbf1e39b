//! End-to-end experiment: data, training, every evaluation, exports, manifest.
//!
//! Each stage is a public function so the CLI can run it alone against a
//! saved checkpoint. Seeds for the stages are derived from the experiment
//! seed with fixed offsets, so a stage run alone draws what it draws inside a
//! full run.

use std::path::{Path, PathBuf};

use freqsense::data::Dataset;
use freqsense::fourier_reg::{train_regularized, EpochLog, TrainConfig};
use freqsense::nn::{build_model, Model, OptimState};
use freqsense::sensitivity::{band_masses, model_sensitivity, SensitivityReport};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cifar::load_cifar_binary;
use crate::config::{DatasetSource, EvalSection, ExperimentConfig, PgdEvalSection};
use crate::error::{HarnessError, Result, StageExt};
use crate::eval::{accuracy, filter_eval, patch_eval, pgd_eval, PgdReport};
use crate::export::{export_csv, export_pgm, Cell, Table};
use crate::heatmap::{fourier_noise_heatmap, Heatmap};
use crate::synth::{gen_split, gen_synthetic_freq_dataset};

/// Seed offset of the synthetic test split relative to the training split.
pub const TEST_SEED_OFFSET: u64 = 1000;
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Per-stage seed streams.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Train = 1,
    Sensitivity = 2,
    Heatmap = 3,
    Patch = 4,
    Pgd = 5,
}

pub fn stage_seed(seed: u64, stream: Stream) -> u64 {
    seed.wrapping_add(stream as u64)
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    match &cfg.dataset {
        DatasetSource::Synthetic { train, test_samples_per_class } => Ok(Datasets {
            train: gen_synthetic_freq_dataset(train)?,
            test: gen_split(train, *test_samples_per_class, TEST_SEED_OFFSET, "test")?,
        }),
        DatasetSource::Cifar { train_path, test_path, max_samples, max_test_samples } => {
            for p in [train_path, test_path] {
                if !p.exists() {
                    return Err(HarnessError::Config(format!("dataset file {} does not exist", p.display())));
                }
            }
            let train = load_cifar_binary(train_path, *max_samples)?;
            let mut test = load_cifar_binary(test_path, *max_test_samples)?;
            test.split = "test".into();
            Ok(Datasets { train, test })
        }
    }
}

/// Trains for `cfg.epochs`; zero epochs returns the initialised model.
pub fn train_stage(cfg: &ExperimentConfig, train: &Dataset) -> Result<(Model, Vec<EpochLog>)> {
    let model = build_model(cfg.model_config())?;
    if cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    let o = &cfg.optimizer;
    let mut state = OptimState::new(o.lr, o.momentum, o.weight_decay);
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: o.batch_size,
        seed: stage_seed(cfg.seed, Stream::Train),
        probe_samples: cfg.eval.probe_samples,
        augment: cfg.augment(),
    };
    Ok(train_regularized(model, train, &cfg.regularizer_spec()?, &mut state, &tc)?)
}

pub fn train_table(log: &[EpochLog]) -> Table {
    let mut t = Table::new(&["epoch", "ce", "sfs", "acc", "low_mass", "mid_mass", "high_mass"]);
    for e in log {
        t.push(vec![e.epoch.into(), e.ce.into(), e.sfs.into(), e.acc.into(), e.low_mass.into(), e.mid_mass.into(), e.high_mass.into()]);
    }
    t
}

/// Writes `sensitivity.csv` and `sensitivity_map.pgm` (full map over its maximum).
pub fn sensitivity_stage(model: &Model, test: &Dataset, cfg: &ExperimentConfig, out: &Path) -> Result<SensitivityReport> {
    let count = cfg.eval.sensitivity_samples.min(test.len());
    let report = model_sensitivity(model, test, count, stage_seed(cfg.seed, Stream::Sensitivity), true)?;
    let mut t = Table::new(&["k", "mean", "std", "inscribed_mean"]);
    for (i, ((m, s), p)) in report.mean.values().iter().zip(&report.std).zip(report.inscribed_mean.values()).enumerate() {
        t.push(vec![(i + 1).into(), (*m).into(), (*s).into(), (*p).into()]);
    }
    export_csv(&t, &out.join("sensitivity.csv"))?;
    let map = report.full_map.as_ref().expect("requested with full map");
    let max = map.values().iter().cloned().fold(0.0, f64::max);
    let scaled: Vec<f64> = map.values().iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();
    export_pgm(&scaled, test.n(), test.n(), &out.join("sensitivity_map.pgm"))?;
    Ok(report)
}

/// Writes `filter_eval.csv`.
pub fn filter_stage(model: &Model, test: &Dataset, radii: &[f64], out: &Path) -> Result<Vec<(f64, f64)>> {
    let rows = filter_eval(model, test, radii)?;
    let mut t = Table::new(&["radius", "accuracy"]);
    rows.iter().for_each(|&(r, a)| t.push(vec![r.into(), a.into()]));
    export_csv(&t, &out.join("filter_eval.csv"))?;
    Ok(rows)
}

/// Writes `fourier_noise.csv` (per epsilon and radius) and one PGM per epsilon.
pub fn heatmap_stage(model: &Model, test: &Dataset, eval: &EvalSection, seed: u64, out: &Path) -> Result<Vec<Heatmap>> {
    let mut t = Table::new(&["epsilon", "k", "mean_error"]);
    let mut maps = Vec::new();
    for (i, &eps) in eval.noise_epsilons.iter().enumerate() {
        let h = fourier_noise_heatmap(model, test, eps, eval.heatmap_samples, stage_seed(seed, Stream::Heatmap))?;
        for (k, e) in h.radial_error()?.into_iter().enumerate() {
            t.push(vec![eps.into(), (k + 1).into(), e.into()]);
        }
        export_pgm(&h.errors, h.n, h.n, &out.join(format!("fourier_noise_{i}.pgm")))?;
        maps.push(h);
    }
    export_csv(&t, &out.join("fourier_noise.csv"))?;
    Ok(maps)
}

/// Writes `patch_eval.csv`.
pub fn patch_stage(model: &Model, test: &Dataset, ks: &[usize], seed: u64, out: &Path) -> Result<Vec<(usize, f64)>> {
    let rows = patch_eval(model, test, ks, stage_seed(seed, Stream::Patch))?;
    let mut t = Table::new(&["k", "accuracy"]);
    rows.iter().for_each(|&(k, a)| t.push(vec![k.into(), a.into()]));
    export_csv(&t, &out.join("patch_eval.csv"))?;
    Ok(rows)
}

/// Writes `pgd_spectrum.csv`: mean power fraction of the perturbations per radius.
pub fn pgd_stage(model: &Model, test: &Dataset, pgd: &PgdEvalSection, seed: u64, out: &Path) -> Result<PgdReport> {
    let report = pgd_eval(model, test, &pgd.to_pgd(), pgd.samples, stage_seed(seed, Stream::Pgd))?;
    let mut t = Table::new(&["k", "power_fraction"]);
    report.mean_profile.iter().enumerate().for_each(|(k, &p)| t.push(vec![(k + 1).into(), p.into()]));
    export_csv(&t, &out.join("pgd_spectrum.csv"))?;
    Ok(report)
}

/// Headline numbers of a run, also written to `summary.csv`.
#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub sensitivity: SensitivityReport,
    pub filter: Vec<(f64, f64)>,
    pub heatmaps: Vec<Heatmap>,
    pub patch: Vec<(usize, f64)>,
    pub pgd: Option<PgdReport>,
}

fn summary_table(s: &ExperimentSummary, n: usize) -> Table {
    let mut t = Table::new(&["metric", "value"]);
    let (lo, mid, hi) = band_masses(&s.sensitivity.mean, n);
    let mut row = |name: &str, v: Cell| t.push(vec![name.into(), v]);
    row("train_accuracy", s.train_accuracy.into());
    row("test_accuracy", s.test_accuracy.into());
    row("sensitivity_low_mass", lo.into());
    row("sensitivity_mid_mass", mid.into());
    row("sensitivity_high_mass", hi.into());
    row("sensitivity_inscribed_entropy", s.sensitivity.inscribed_mean.entropy(n).into());
    row("sensitivity_samples", s.sensitivity.n_samples.into());
    row("sensitivity_skipped", s.sensitivity.skipped.into());
    if let Some(p) = &s.pgd {
        row("pgd_clean_accuracy", p.clean_accuracy.into());
        row("pgd_adversarial_accuracy", p.adversarial_accuracy.into());
        row("pgd_low_mass", p.low_mass.into());
        row("pgd_skipped", p.skipped.into());
    }
    t
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: String,
    config: &'a ExperimentConfig,
    versions: Versions,
    files: Vec<FileDigest>,
}

#[derive(Serialize)]
struct Versions {
    freqsense: &'static str,
    harness: &'static str,
    checkpoint_format: u32,
}

#[derive(Serialize)]
struct FileDigest {
    name: String,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `manifest.json` listing every other file in `out` with its digest.
pub fn write_manifest(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut names: Vec<String> = std::fs::read_dir(out)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST_FILE)
        .collect();
    names.sort();
    let files = names
        .into_iter()
        .map(|name| Ok(FileDigest { sha256: sha256_hex(&std::fs::read(out.join(&name))?), name }))
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        config_hash: cfg.hash(),
        config: cfg,
        versions: Versions {
            freqsense: freqsense::VERSION,
            harness: env!("CARGO_PKG_VERSION"),
            checkpoint_format: freqsense::nn::CHECKPOINT_VERSION,
        },
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| HarnessError::Export(e.to_string()))?;
    std::fs::write(out.join(MANIFEST_FILE), text + "\n")?;
    Ok(())
}

pub fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.output_dir.clone().ok_or_else(|| HarnessError::Config("output_dir is not set".into()))
}

/// Runs every stage and writes all artifacts to `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate().stage("config")?;
    let out = output_dir(cfg)?;
    std::fs::create_dir_all(&out).stage("output")?;
    let data = load_datasets(cfg).stage("dataset")?;

    let (model, log) = train_stage(cfg, &data.train).stage("train")?;
    std::fs::write(out.join(CHECKPOINT_FILE), model.to_checkpoint()).stage("train")?;
    export_csv(&train_table(&log), &out.join("train.csv")).stage("train")?;

    let train_accuracy = accuracy(&model, &data.train).stage("accuracy")?;
    let test_accuracy = accuracy(&model, &data.test).stage("accuracy")?;
    let sensitivity = sensitivity_stage(&model, &data.test, cfg, &out).stage("sensitivity")?;
    let filter = filter_stage(&model, &data.test, &cfg.eval.filter_radii, &out).stage("filter-eval")?;
    let heatmaps = heatmap_stage(&model, &data.test, &cfg.eval, cfg.seed, &out).stage("heatmap")?;
    let patch = patch_stage(&model, &data.test, &cfg.eval.patch_ks, cfg.seed, &out).stage("patch-eval")?;
    let pgd = cfg.eval.pgd.as_ref().map(|p| pgd_stage(&model, &data.test, p, cfg.seed, &out)).transpose().stage("attack-spectrum")?;

    let summary = ExperimentSummary {
        out_dir: out.clone(),
        config_hash: cfg.hash(),
        train_accuracy,
        test_accuracy,
        sensitivity,
        filter,
        heatmaps,
        patch,
        pgd,
    };
    export_csv(&summary_table(&summary, data.test.n()), &out.join("summary.csv")).stage("export")?;
    write_manifest(cfg, &out).stage("manifest")?;
    Ok(summary)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    Ok(Model::from_checkpoint(&bytes)?)
}
