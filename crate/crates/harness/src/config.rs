//! JSON experiment configuration. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use freqsense::corruptions::PgdConfig;
use freqsense::fourier_reg::{Augment, RegularizerKind, RegularizerSpec};
use freqsense::nn::{Arch, ModelConfig, Pool};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives model initialisation, batch order and every evaluation draw.
    pub seed: u64,
    pub dataset: DatasetSource,
    pub model: ModelSection,
    #[serde(default)]
    pub regularizer: RegularizerSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        train: SynthConfig,
        #[serde(default = "default_test_per_class")]
        test_samples_per_class: usize,
    },
    Cifar {
        train_path: PathBuf,
        test_path: PathBuf,
        #[serde(default = "default_cifar_max")]
        max_samples: usize,
        #[serde(default = "default_cifar_test_max")]
        max_test_samples: usize,
    },
}

fn default_test_per_class() -> usize {
    100
}

fn default_cifar_max() -> usize {
    5000
}

fn default_cifar_test_max() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchName {
    Mlp,
    CnnSmall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolName {
    #[default]
    Avg,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchName,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub pool: PoolName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerName {
    #[default]
    None,
    Lsf,
    Msf,
    Hsf,
    Asf,
}

impl From<RegularizerName> for RegularizerKind {
    fn from(r: RegularizerName) -> Self {
        match r {
            RegularizerName::None => RegularizerKind::None,
            RegularizerName::Lsf => RegularizerKind::Lsf,
            RegularizerName::Msf => RegularizerKind::Msf,
            RegularizerName::Hsf => RegularizerKind::Hsf,
            RegularizerName::Asf => RegularizerKind::Asf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSection {
    #[serde(default)]
    pub kind: RegularizerName,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    0.5
}

impl Default for RegularizerSection {
    fn default() -> Self {
        Self { kind: RegularizerName::None, lambda: default_lambda() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_lr() -> f64 {
    0.02
}

fn default_momentum() -> f64 {
    0.9
}

fn default_wd() -> f64 {
    5e-4
}

fn default_batch() -> usize {
    32
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self { lr: default_lr(), momentum: default_momentum(), weight_decay: default_wd(), batch_size: default_batch() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentSection {
    #[default]
    None,
    Gaussian {
        sigma: f64,
    },
    Pgd(PgdSection),
    CropFlip {
        pad: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdSection {
    pub epsilon: f64,
    #[serde(default = "default_pgd_steps")]
    pub steps: usize,
    /// Defaults to `2.5 * epsilon / steps`.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub random_start: bool,
}

fn default_pgd_steps() -> usize {
    7
}

impl PgdSection {
    pub fn to_pgd(&self) -> PgdConfig {
        let mut cfg = PgdConfig::standard(self.epsilon, self.steps);
        if let Some(a) = self.step_size {
            cfg.step_size = a;
        }
        cfg.random_start = self.random_start;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdEvalSection {
    pub epsilon: f64,
    #[serde(default = "default_pgd_steps")]
    pub steps: usize,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default = "default_pgd_samples")]
    pub samples: usize,
}

impl PgdEvalSection {
    pub fn to_pgd(&self) -> PgdConfig {
        PgdSection { epsilon: self.epsilon, steps: self.steps, step_size: self.step_size, random_start: self.random_start }.to_pgd()
    }
}

fn default_pgd_samples() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Test samples averaged by the sensitivity report.
    #[serde(default = "default_sens_samples")]
    pub sensitivity_samples: usize,
    /// Training samples probed per epoch for the band masses in train.csv.
    #[serde(default = "default_probe")]
    pub probe_samples: usize,
    #[serde(default)]
    pub filter_radii: Vec<f64>,
    #[serde(default)]
    pub noise_epsilons: Vec<f64>,
    #[serde(default = "default_heatmap_samples")]
    pub heatmap_samples: usize,
    #[serde(default)]
    pub patch_ks: Vec<usize>,
    #[serde(default)]
    pub pgd: Option<PgdEvalSection>,
}

fn default_sens_samples() -> usize {
    100
}

fn default_probe() -> usize {
    64
}

fn default_heatmap_samples() -> usize {
    100
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sensitivity_samples: default_sens_samples(),
            probe_samples: default_probe(),
            filter_radii: Vec::new(),
            noise_epsilons: Vec::new(),
            heatmap_samples: default_heatmap_samples(),
            patch_ks: Vec::new(),
            pgd: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Compact JSON with fields in declaration order; the hashed form.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of `canonical_json`.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks everything that can be checked without touching the file system.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        match &self.dataset {
            DatasetSource::Synthetic { train, .. } => train.validate()?,
            DatasetSource::Cifar { .. } => {}
        }
        if self.optimizer.batch_size == 0 {
            return bad("optimizer.batch_size must be positive".into());
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad(format!("optimizer.lr must be positive, got {}", self.optimizer.lr));
        }
        if self.regularizer.kind != RegularizerName::None {
            RegularizerSpec::new(self.regularizer.kind.into(), self.regularizer.lambda, self.input_shape().1)?;
        }
        if let Some(r) = self.eval.filter_radii.iter().find(|r| !(**r >= 0.0)) {
            return bad(format!("filter radius {r} is negative"));
        }
        if let Some(e) = self.eval.noise_epsilons.iter().find(|e| !(**e > 0.0)) {
            return bad(format!("fourier-noise epsilon {e} must be positive"));
        }
        if let Some(k) = self.eval.patch_ks.iter().find(|&&k| k == 0 || self.input_shape().1 % k != 0) {
            return bad(format!("patch grid {k} does not divide the image side {}", self.input_shape().1));
        }
        Ok(())
    }

    /// (channels, side, classes) implied by the dataset source.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match &self.dataset {
            DatasetSource::Synthetic { train, .. } => (train.channels, train.n, train.class_bands.len()),
            DatasetSource::Cifar { .. } => (3, 32, 10),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let (channels, n, classes) = self.input_shape();
        ModelConfig {
            arch: match self.model.arch {
                ArchName::Mlp => Arch::Mlp,
                ArchName::CnnSmall => Arch::CnnSmall,
            },
            channels,
            n,
            classes,
            widths: self.model.widths.clone(),
            pool: match self.model.pool {
                PoolName::Avg => Pool::Avg,
                PoolName::Max => Pool::Max,
            },
            seed: self.seed,
        }
    }

    pub fn regularizer_spec(&self) -> Result<RegularizerSpec> {
        let n = self.input_shape().1;
        Ok(match self.regularizer.kind {
            RegularizerName::None => RegularizerSpec::none(n),
            k => RegularizerSpec::new(k.into(), self.regularizer.lambda, n)?,
        })
    }

    pub fn augment(&self) -> Augment {
        match &self.augment {
            AugmentSection::None => Augment::None,
            AugmentSection::Gaussian { sigma } => Augment::Gaussian { sigma: *sigma },
            AugmentSection::Pgd(p) => Augment::Pgd(p.to_pgd()),
            AugmentSection::CropFlip { pad } => Augment::CropFlip { pad: *pad },
        }
    }
}
