use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 8] = ["gen-synth", "train", "run", "sensitivity", "heatmap", "filter-eval", "patch-eval", "attack-spectrum"];

fn freqsense(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqsense")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, lr: f64) -> String {
    let path = dir.join("cfg.json");
    let text = format!(
        r#"{{"seed": 1,
            "dataset": {{"synthetic": {{"train": {{"samples_per_class": 6, "seed": 4}}, "test_samples_per_class": 3}}}},
            "model": {{"arch": "cnn-small", "widths": [2, 2, 2]}},
            "optimizer": {{"lr": {lr:e}}},
            "epochs": 1,
            "eval": {{"sensitivity_samples": 8, "probe_samples": 4, "filter_radii": [3], "heatmap_samples": 2, "patch_ks": [2]}}}}"#
    );
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    let top = freqsense(&["--help"]);
    assert_eq!(top.status.code(), Some(0));
    let text = String::from_utf8_lossy(&top.stdout);
    for sub in SUBCOMMANDS {
        assert!(text.contains(sub), "{sub} missing from top-level help");
        let out = freqsense(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_one_with_a_diagnostic() {
    for args in [&["--bogus", "run"][..], &["run", "--seed", "minus-one"], &["frobnicate"], &[]] {
        let out = freqsense(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty(), "{args:?}");
    }
    let out = freqsense(&["run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = freqsense(&["--config", "/nonexistent.json", "run"]);
    assert_eq!(out.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "typo": 2}"#).unwrap();
    let out = freqsense(&["--config", bad.to_str().unwrap(), "run"]);
    assert_eq!(out.status.code(), Some(2));
    // a stage command without a checkpoint
    let cfg = write_config(dir.path(), 0.02);
    let out = freqsense(&["--config", &cfg, "--out", dir.path().join("empty").to_str().unwrap(), "sensitivity"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1e200);
    let out = freqsense(&["--config", &cfg, "--out", dir.path().join("o").to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn stage_commands_reuse_the_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0.02);
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let base = ["--config", cfg.as_str(), "--out", out, "--threads", "1"];
    let run = |extra: &[&str]| {
        let o = freqsense(&[&base[..], extra].concat());
        assert_eq!(o.status.code(), Some(0), "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["gen-synth"]);
    run(&["train"]);
    run(&["sensitivity"]);
    run(&["heatmap", "--epsilon", "4", "--samples", "2"]);
    run(&["filter-eval"]);
    run(&["patch-eval", "--k", "4"]);
    run(&["attack-spectrum", "--samples", "3", "--steps", "2"]);
    for f in ["synth_preview.pgm", "synth_spectrum.csv", "checkpoint.bin", "train.csv", "manifest.json", "sensitivity.csv", "fourier_noise.csv", "filter_eval.csv", "patch_eval.csv", "pgd_spectrum.csv"] {
        assert!(Path::new(out).join(f).exists(), "{f}");
    }
    let patch = std::fs::read_to_string(Path::new(out).join("patch_eval.csv")).unwrap();
    assert!(patch.lines().nth(1).unwrap().starts_with("4,"));
    // the seed override changes the run
    let other = dir.path().join("p");
    let o = freqsense(&["--config", &cfg, "--out", other.to_str().unwrap(), "--seed", "9", "train"]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(std::fs::read(Path::new(out).join("checkpoint.bin")).unwrap(), std::fs::read(other.join("checkpoint.bin")).unwrap());
}
