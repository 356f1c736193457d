//! Acceptance suite for the pipeline-level criteria: the synthetic
//! benchmark, the full-width reproduction on externally supplied data, and
//! byte-level determinism of the experiment pipeline.

use std::path::PathBuf;
use std::process::Command;
use std::time::Instant;

use pinda_cli::config::{
    AugmentationConfig, DatasetConfig, EvalSection, ExperimentConfig, MethodName, ModelConfig,
    NoiseKindName, TrainSection, VariantName,
};
use pinda_cli::data::{RescaleMode, SyntheticGenerator, SyntheticSpec};
use pinda_cli::experiment::run_experiment;

fn report(criterion: &str, passed: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {criterion} failed: {detail}");
}

fn skip(criterion: &str, detail: &str) {
    println!("criterion {criterion}: SKIP ({detail})");
}

// ── Criterion 5: synthetic benchmark ─────────────────────────────────

/// Four blobs in 32 dimensions: four informative axes, 28 nuisance axes,
/// moderate overlap. The learned-noise run places jitter alongside the
/// learned slot; a raised sigma floor plus the norm penalty keep the
/// generator from collapsing its noise to nothing.
fn blob_config(method: MethodName) -> ExperimentConfig {
    let learned = method == MethodName::Pinda;
    ExperimentConfig {
        name: format!("blobs-{method:?}"),
        dataset: DatasetConfig::Synthetic(SyntheticSpec {
            generator: SyntheticGenerator::GaussianBlobs,
            classes: 4,
            per_class: 500,
            dim: 32,
            center_spacing: 6.0,
            noise_sigma: 1.0,
            seed: 0,
        }),
        rescale: RescaleMode::Standardize,
        method,
        noise_kind: NoiseKindName::GaussianZeroMean,
        augmentations: if learned {
            vec![AugmentationConfig::GaussianJitter { sigma: 1.0 }]
        } else {
            vec![]
        },
        simcl_scale: 1.0,
        model: ModelConfig {
            hidden_dim: 64,
            repr_dim: 32,
            proj_hidden_dim: 32,
            proj_dim: 16,
            generator_hidden_dim: 64,
        },
        train: TrainSection {
            temperature: 0.1,
            variant: VariantName::Simclr,
            batch_size: 128,
            epochs: 60,
            learning_rate: 1e-3,
            lambda_norm: 2.0,
            mc_samples: 1,
            sigma_floor: if learned { 0.5 } else { 1e-6 },
        },
        eval: EvalSection::default(),
        seeds: vec![0, 1, 2, 3, 4],
        split_fraction: 0.8,
        split_seed: 0,
        checkpoint_dir: None,
    }
}

#[test]
fn criterion_5_synthetic_benchmark() {
    let start = Instant::now();
    let pinda = run_experiment(&blob_config(MethodName::Pinda)).expect("pinda run");
    let baseline =
        run_experiment(&blob_config(MethodName::RandomNoise)).expect("baseline run");

    let mut losses_decrease = true;
    for history in &pinda.loss_history {
        assert!(history.len() >= 10, "need at least ten epochs");
        losses_decrease &= history[9] < history[0];
    }
    for history in &baseline.loss_history {
        losses_decrease &= history[9] < history[0];
    }

    let elapsed = start.elapsed();
    report(
        "5 (synthetic benchmark)",
        pinda.softmax.mean >= baseline.softmax.mean
            && losses_decrease
            && elapsed.as_secs() < 600,
        &format!(
            "softmax: learned-noise {:.4} vs random-noise {:.4}; knn {:.4} vs {:.4}; \
             epoch-10 < epoch-1 for all seeds: {losses_decrease}; {elapsed:.2?}",
            pinda.softmax.mean, baseline.softmax.mean, pinda.knn.mean, baseline.knn.mean
        ),
    );
}

// ── Criterion 6: full-width reproduction on provided data ────────────

/// Runs only when PINDA_HAR_TRAIN / PINDA_HAR_TEST point at the prepared
/// 561-feature CSVs (label last, no header). Reference targets: softmax
/// regression 86.20, kNN 77.14, both within +-3.0 points over 5 seeds.
#[test]
fn criterion_6_har_reproduction() {
    let (train, test) = match (
        std::env::var("PINDA_HAR_TRAIN"),
        std::env::var("PINDA_HAR_TEST"),
    ) {
        (Ok(train), Ok(test)) => (PathBuf::from(train), PathBuf::from(test)),
        _ => {
            skip(
                "6 (HAR reproduction)",
                "set PINDA_HAR_TRAIN and PINDA_HAR_TEST to the prepared CSVs to run; \
                 dataset is user-supplied and not bundled",
            );
            return;
        }
    };
    let half_width = std::env::var("PINDA_HAR_HALF").is_ok();
    let epochs: usize = std::env::var("PINDA_HAR_EPOCHS")
        .ok()
        .and_then(|e| e.parse().ok())
        .unwrap_or(20);
    let width = if half_width { 512 } else { 1024 };

    let har_config = |method: MethodName| ExperimentConfig {
        name: String::from("har"),
        dataset: DatasetConfig::Csv {
            train_path: train.clone(),
            test_path: Some(test.clone()),
            has_header: false,
            has_labels: true,
        },
        rescale: RescaleMode::Standardize,
        method,
        noise_kind: NoiseKindName::GaussianZeroMean,
        augmentations: vec![],
        simcl_scale: 1.0,
        model: ModelConfig {
            hidden_dim: width,
            repr_dim: 256,
            proj_hidden_dim: 256,
            proj_dim: 128,
            generator_hidden_dim: width,
        },
        train: TrainSection { epochs, ..TrainSection::default() },
        eval: EvalSection::default(),
        seeds: vec![0, 1, 2, 3, 4],
        split_fraction: 0.8,
        split_seed: 0,
        checkpoint_dir: None,
    };

    let start = Instant::now();
    let pinda = run_experiment(&har_config(MethodName::Pinda)).expect("har run");
    let elapsed = start.elapsed();

    if half_width {
        // Budget fallback: the half-width run must beat the random-noise
        // baseline by at least two points of softmax-regression accuracy.
        let baseline =
            run_experiment(&har_config(MethodName::RandomNoise)).expect("baseline run");
        let margin = (pinda.softmax.mean - baseline.softmax.mean) * 100.0;
        report(
            "6 (HAR half-width fallback)",
            margin >= 2.0,
            &format!(
                "softmax margin over random noise {margin:.2} points \
                 ({:.4} vs {:.4}), {elapsed:.2?}",
                pinda.softmax.mean, baseline.softmax.mean
            ),
        );
    } else {
        let sr = pinda.softmax.mean * 100.0;
        let knn = pinda.knn.mean * 100.0;
        report(
            "6 (HAR reproduction)",
            (sr - 86.20).abs() <= 3.0 && (knn - 77.14).abs() <= 3.0,
            &format!(
                "softmax {sr:.2} (target 86.20 +- 3.0), knn {knn:.2} \
                 (target 77.14 +- 3.0), {epochs} epochs, {elapsed:.2?}"
            ),
        );
    }
}

// ── Criterion 8: byte-identical reports ──────────────────────────────

#[test]
fn criterion_8_byte_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config_json = r#"{
        "name": "determinism",
        "dataset": {"kind": "synthetic", "generator": "gaussian_blobs",
                    "classes": 2, "per_class": 40, "dim": 8,
                    "center_spacing": 6.0, "noise_sigma": 1.0, "seed": 3},
        "method": "pinda",
        "model": {"hidden_dim": 24, "repr_dim": 12, "proj_hidden_dim": 12,
                  "proj_dim": 6, "generator_hidden_dim": 16},
        "train": {"batch_size": 32, "epochs": 3},
        "eval": {"sr_epochs": 10},
        "seeds": [7]
    }"#;
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, config_json).unwrap();

    let run = |out_name: &str| -> Vec<u8> {
        let out = dir.path().join(out_name);
        let status = Command::new(env!("CARGO_BIN_EXE_pinda"))
            .args([
                "train",
                "--config",
                config_path.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
            .env("PINDA_LOG", "quiet")
            .status()
            .expect("binary runs");
        assert!(status.success());
        std::fs::read(&out).unwrap()
    };

    let first = run("a.json");
    let second = run("b.json");
    report(
        "8 (byte-identical metrics)",
        first == second,
        &format!("two invocations, {} bytes each", first.len()),
    );
}
