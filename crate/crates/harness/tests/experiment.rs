use std::path::Path;

use freqsense_harness::config::{ExperimentConfig, RegularizerName};
use freqsense_harness::experiment::run_experiment;
use freqsense_harness::HarnessError;

fn config_json(out: &Path, epochs: usize) -> String {
    format!(
        r#"{{
  "seed": 5,
  "dataset": {{"synthetic": {{"train": {{"samples_per_class": 8, "noise_sigma": 0.05, "seed": 2}}, "test_samples_per_class": 4}}}},
  "model": {{"arch": "cnn-small", "widths": [2, 3, 3]}},
  "regularizer": {{"kind": "lsf", "lambda": 0.5}},
  "optimizer": {{"lr": 0.02, "batch_size": 8}},
  "epochs": {epochs},
  "eval": {{
    "sensitivity_samples": 16, "probe_samples": 8,
    "filter_radii": [2.5, 6], "noise_epsilons": [1, 4], "heatmap_samples": 4,
    "patch_ks": [2, 4], "pgd": {{"epsilon": 1.0, "steps": 3, "samples": 6}}
  }},
  "output_dir": {out:?}
}}"#
    )
}

fn config(out: &Path, epochs: usize) -> ExperimentConfig {
    ExperimentConfig::from_json(&config_json(out, epochs)).unwrap()
}

const OUTPUTS: [&str; 12] = [
    "checkpoint.bin",
    "filter_eval.csv",
    "fourier_noise.csv",
    "fourier_noise_0.pgm",
    "fourier_noise_1.pgm",
    "manifest.json",
    "patch_eval.csv",
    "pgd_spectrum.csv",
    "sensitivity.csv",
    "sensitivity_map.pgm",
    "summary.csv",
    "train.csv",
];

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names
}

#[test]
fn evaluation_only_run_emits_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let s = run_experiment(&config(dir.path(), 0)).unwrap();
    assert_eq!(listing(dir.path()), OUTPUTS);
    assert_eq!(std::fs::read_to_string(dir.path().join("train.csv")).unwrap(), "epoch,ce,sfs,acc,low_mass,mid_mass,high_mass\n");
    let sens = std::fs::read_to_string(dir.path().join("sensitivity.csv")).unwrap();
    assert_eq!(sens.lines().count(), 1 + 11);
    assert_eq!(s.heatmaps.len(), 2);
    assert_eq!(s.filter.len(), 2);
    let noise = std::fs::read_to_string(dir.path().join("fourier_noise.csv")).unwrap();
    assert_eq!(noise.lines().count(), 1 + 2 * 11);
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&config(a.path(), 2)).unwrap();
    run_experiment(&config(b.path(), 2)).unwrap();
    for name in OUTPUTS.iter().filter(|n| **n != "manifest.json") {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    assert_eq!(std::fs::read_to_string(a.path().join("train.csv")).unwrap().lines().count(), 3);
}

#[test]
fn manifest_records_hash_versions_and_digests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 0);
    run_experiment(&cfg).unwrap();
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config_hash"], cfg.hash());
    assert_eq!(m["versions"]["freqsense"], freqsense::VERSION);
    let files = m["files"].as_array().unwrap();
    assert_eq!(files.len(), OUTPUTS.len() - 1);
    assert_eq!(ExperimentConfig::from_json(&m["config"].to_string()).unwrap(), cfg);
}

#[test]
fn hash_changes_iff_the_config_changes() {
    let out = Path::new("/tmp/unused");
    let base = config(out, 1);
    // formatting and key order do not matter
    let reordered: serde_json::Value = serde_json::from_str(&config_json(out, 1)).unwrap();
    assert_eq!(ExperimentConfig::from_json(&serde_json::to_string_pretty(&reordered).unwrap()).unwrap().hash(), base.hash());
    assert_eq!(config(out, 1).hash(), base.hash());
    let mut variants: Vec<ExperimentConfig> = Vec::new();
    let mut push = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        variants.push(c);
    };
    push(&|c| c.seed += 1);
    push(&|c| c.epochs = 2);
    push(&|c| c.regularizer.lambda = 0.25);
    push(&|c| c.regularizer.kind = RegularizerName::Hsf);
    push(&|c| c.optimizer.lr = 0.01);
    push(&|c| c.optimizer.momentum = 0.0);
    push(&|c| c.model.widths[0] = 4);
    push(&|c| c.eval.filter_radii.push(1.0));
    push(&|c| c.eval.heatmap_samples = 5);
    push(&|c| c.eval.pgd = None);
    push(&|c| c.output_dir = Some("/tmp/other".into()));
    for (i, v) in variants.iter().enumerate() {
        assert_ne!(v.hash(), base.hash(), "variant {i}");
        for w in &variants[i + 1..] {
            assert_ne!(v.hash(), w.hash());
        }
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let text = config_json(Path::new("/tmp/x"), 0).replace("\"epochs\"", "\"epoch\"");
    assert!(matches!(ExperimentConfig::from_json(&text), Err(HarnessError::Config(_))));
    let text = config_json(Path::new("/tmp/x"), 0).replace("\"noise_sigma\"", "\"noise\"");
    assert!(matches!(ExperimentConfig::from_json(&text), Err(HarnessError::Config(_))));
}

#[test]
fn errors_carry_the_stage_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), 0);
    cfg.dataset = serde_json::from_str(r#"{"cifar": {"train_path": "/nonexistent/data_batch_1.bin", "test_path": "/nonexistent/test_batch.bin"}}"#).unwrap();
    cfg.eval.patch_ks = vec![2];
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(&err, HarnessError::Stage { stage: "dataset", .. }), "{err}");
    assert!(err.to_string().starts_with("dataset:"));
    assert_eq!(err.exit_code(), 2);

    let mut cfg = config(dir.path(), 2);
    cfg.optimizer.lr = 1e200;
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(&err, HarnessError::Stage { stage: "train", .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn cifar_source_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for r in 0..12u8 {
        bytes.push(r % 10);
        bytes.extend((0..3072u32).map(|j| ((j * (r as u32 + 1)) % 256) as u8));
    }
    let batch = dir.path().join("batch.bin");
    std::fs::write(&batch, &bytes).unwrap();
    let out = dir.path().join("out");
    let text = format!(
        r#"{{"seed": 1,
            "dataset": {{"cifar": {{"train_path": {batch:?}, "test_path": {batch:?}, "max_samples": 12, "max_test_samples": 6}}}},
            "model": {{"arch": "mlp", "widths": [4]}},
            "epochs": 1,
            "eval": {{"sensitivity_samples": 6, "probe_samples": 4, "filter_radii": [5], "patch_ks": [4]}},
            "output_dir": {out:?}}}"#
    );
    let s = run_experiment(&ExperimentConfig::from_json(&text).unwrap()).unwrap();
    assert_eq!(s.sensitivity.mean.len(), 22);
    assert!(out.join("filter_eval.csv").exists());
}

#[test]
fn augment_variants_map_to_the_training_hook() {
    use freqsense::fourier_reg::Augment;
    let base = config_json(Path::new("/tmp/x"), 1);
    let with = |aug: &str| ExperimentConfig::from_json(&base.replacen("\"epochs\"", &format!("\"augment\": {aug}, \"epochs\""), 1)).unwrap().augment();
    assert_eq!(with("\"none\""), Augment::None);
    assert_eq!(with(r#"{"gaussian": {"sigma": 0.1}}"#), Augment::Gaussian { sigma: 0.1 });
    assert_eq!(with(r#"{"crop_flip": {"pad": 2}}"#), Augment::CropFlip { pad: 2 });
    match with(r#"{"pgd": {"epsilon": 2.0, "steps": 4}}"#) {
        Augment::Pgd(p) => assert_eq!((p.epsilon, p.steps, p.step_size), (2.0, 4, 0.5)),
        other => panic!("{other:?}"),
    }
    assert!(ExperimentConfig::from_json(&base.replacen("\"epochs\"", "\"augment\": {\"blur\": {}}, \"epochs\"", 1)).is_err());
}
