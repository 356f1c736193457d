//! The full experiment pipeline: load, rescale, train per seed, evaluate,
//! aggregate, and write the metrics report.

use std::path::Path;

use pinda_core::eval::{evaluate, MetricSummary};
use pinda_core::train::Trainer;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointFile;
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::data::{
    apply_rescale, fit_rescale, load_csv, make_synthetic, split_dataset, DatasetBundle,
};
use crate::error::{CliError, Result};
use crate::log_info;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<f64>,
}

impl From<MetricSummary> for MetricStats {
    fn from(s: MetricSummary) -> Self {
        MetricStats { mean: s.mean, std: s.std, runs: s.runs }
    }
}

/// The reproducible result of one experiment invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub knn: MetricStats,
    pub softmax: MetricStats,
    /// Per-seed epoch-mean training losses.
    pub loss_history: Vec<Vec<f64>>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Resolve the dataset section into rescaled train/test splits. Scaling is
/// fitted on the train side and applied to both.
pub fn prepare_data(config: &ExperimentConfig) -> Result<DatasetBundle> {
    let bundle = match &config.dataset {
        DatasetConfig::Csv { train_path, test_path, has_header, has_labels } => {
            let train = load_csv(train_path, *has_labels, *has_header)?;
            match test_path {
                Some(test_path) => {
                    let test = load_csv(test_path, *has_labels, *has_header)?;
                    if test.dim() != train.dim() {
                        return Err(CliError::Ingestion(format!(
                            "train has {} features but test has {}",
                            train.dim(),
                            test.dim()
                        )));
                    }
                    DatasetBundle { train, test }
                }
                None => split_dataset(&train, config.split_fraction, config.split_seed)?,
            }
        }
        DatasetConfig::Synthetic(spec) => {
            let all = make_synthetic(spec)?;
            split_dataset(&all, config.split_fraction, config.split_seed)?
        }
    };
    let state = fit_rescale(&bundle.train.features, config.rescale);
    Ok(DatasetBundle {
        train: apply_rescale(&bundle.train, &state),
        test: apply_rescale(&bundle.test, &state),
    })
}

/// Train and evaluate across all configured seeds.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    let data = prepare_data(config)?;
    let train_labels = data.train.labels_or_err()?.to_vec();
    let test_labels = data.test.labels_or_err()?.to_vec();
    log_info!(
        "dataset `{}`: {} train / {} test rows, {} features",
        data.train.name,
        data.train.len(),
        data.test.len(),
        data.train.dim()
    );

    let config_hash = config.hash();
    let mut knn_runs = Vec::with_capacity(config.seeds.len());
    let mut sr_runs = Vec::with_capacity(config.seeds.len());
    let mut histories = Vec::with_capacity(config.seeds.len());

    for &seed in &config.seeds {
        let train_config = config.train_config(data.train.dim(), seed);
        let mut trainer =
            Trainer::new(train_config).map_err(|e| CliError::Train(e.to_string()))?;
        trainer
            .train_with(&data.train.features, |epoch, loss| {
                log_info!("seed {seed} epoch {epoch}: mean loss {loss:.6}");
            })
            .map_err(|e| CliError::Train(e.to_string()))?;

        if let Some(dir) = &config.checkpoint_dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::Checkpoint(format!("{}: {e}", dir.display())))?;
            let file = CheckpointFile::from_state(
                trainer.export_state(),
                config_hash.clone(),
                seed,
            );
            file.save(&dir.join(format!("seed_{seed}.json")))?;
        }

        let report = evaluate(
            &trainer.encoder,
            &data.train.features,
            &train_labels,
            &data.test.features,
            &test_labels,
            &config.eval_settings(seed),
        )
        .map_err(|e| CliError::Eval(e.to_string()))?;
        log_info!(
            "seed {seed}: knn {:.4}  softmax {:.4}",
            report.knn.mean,
            report.softmax.mean
        );
        knn_runs.push(report.knn.mean);
        sr_runs.push(report.softmax.mean);
        histories.push(trainer.loss_history.clone());
    }

    Ok(MetricsReport {
        dataset: data.train.name.clone(),
        config_hash,
        seeds: config.seeds.clone(),
        knn: MetricStats::from(MetricSummary::from_runs(knn_runs)),
        softmax: MetricStats::from(MetricSummary::from_runs(sr_runs)),
        loss_history: histories,
    })
}

/// Evaluate a checkpointed encoder under the experiment's protocol.
pub fn evaluate_checkpoint(
    config: &ExperimentConfig,
    checkpoint_path: &Path,
) -> Result<MetricsReport> {
    let data = prepare_data(config)?;
    let train_labels = data.train.labels_or_err()?.to_vec();
    let test_labels = data.test.labels_or_err()?.to_vec();

    let file = CheckpointFile::load(checkpoint_path)?;
    let seed = file.seed;
    let train_config = config.train_config(data.train.dim(), seed);
    let mut trainer = Trainer::new(train_config).map_err(|e| CliError::Train(e.to_string()))?;
    let state = file.into_state();
    let loss_history = state.loss_history.clone();
    trainer
        .restore_state(&state)
        .map_err(|e| CliError::Checkpoint(e.to_string()))?;

    let settings = pinda_core::eval::EvalSettings {
        k: config.eval.k,
        sr_epochs: config.eval.sr_epochs,
        sr_batch_size: config.eval.sr_batch_size,
        sr_learning_rate: config.eval.sr_learning_rate,
        seeds: config.seeds.clone(),
    };
    let report = evaluate(
        &trainer.encoder,
        &data.train.features,
        &train_labels,
        &data.test.features,
        &test_labels,
        &settings,
    )
    .map_err(|e| CliError::Eval(e.to_string()))?;

    Ok(MetricsReport {
        dataset: data.train.name.clone(),
        config_hash: config.hash(),
        seeds: config.seeds.clone(),
        knn: MetricStats::from(report.knn),
        softmax: MetricStats::from(report.softmax),
        loss_history: vec![loss_history],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        DatasetConfig, EvalSection, MethodName, ModelConfig, NoiseKindName, TrainSection,
        VariantName,
    };
    use crate::data::{RescaleMode, SyntheticGenerator, SyntheticSpec};

    pub(crate) fn tiny_experiment(method: MethodName) -> ExperimentConfig {
        ExperimentConfig {
            name: String::from("tiny"),
            dataset: DatasetConfig::Synthetic(SyntheticSpec {
                generator: SyntheticGenerator::GaussianBlobs,
                classes: 2,
                per_class: 40,
                dim: 8,
                center_spacing: 6.0,
                noise_sigma: 1.0,
                seed: 0,
            }),
            rescale: RescaleMode::Standardize,
            method,
            noise_kind: NoiseKindName::GaussianZeroMean,
            augmentations: vec![],
            simcl_scale: 1.0,
            model: ModelConfig {
                hidden_dim: 24,
                repr_dim: 12,
                proj_hidden_dim: 12,
                proj_dim: 6,
                generator_hidden_dim: 16,
            },
            train: TrainSection {
                temperature: 0.1,
                variant: VariantName::Simclr,
                batch_size: 32,
                epochs: 3,
                learning_rate: 1e-3,
                lambda_norm: 1.0,
                mc_samples: 1,
                sigma_floor: 1e-6,
            },
            eval: EvalSection { sr_epochs: 10, ..EvalSection::default() },
            seeds: vec![0, 1],
            split_fraction: 0.8,
            split_seed: 0,
            checkpoint_dir: None,
        }
    }

    #[test]
    fn pipeline_is_deterministic_for_every_method() {
        for method in [
            MethodName::Pinda,
            MethodName::RandomNoise,
            MethodName::SimclReprNoise,
            MethodName::PlainInfonce,
        ] {
            let config = tiny_experiment(method);
            let a = run_experiment(&config).unwrap();
            let b = run_experiment(&config).unwrap();
            assert_eq!(a, b, "{method:?}");
            assert_eq!(a.to_json(), b.to_json());
            assert!(a.knn.mean.is_finite() && a.softmax.mean.is_finite());
            assert_eq!(a.loss_history.len(), 2);
            assert!(a.loss_history.iter().flatten().all(|l| l.is_finite()));
        }
    }

    #[test]
    fn rescaling_is_fitted_on_train_only() {
        let config = tiny_experiment(MethodName::PlainInfonce);
        let data = prepare_data(&config).unwrap();
        // Train side standardizes to mean ~0 per feature.
        let d = data.train.dim();
        for j in 0..d {
            let mean: f64 = (0..data.train.len())
                .map(|i| data.train.features.data()[i * d + j])
                .sum::<f64>()
                / data.train.len() as f64;
            assert!(mean.abs() < 1e-9, "feature {j} mean {mean}");
        }
        // Test side reuses train statistics, so its mean is only close.
        let j = 0;
        let test_mean: f64 = (0..data.test.len())
            .map(|i| data.test.features.data()[i * d + j])
            .sum::<f64>()
            / data.test.len() as f64;
        assert!(test_mean.abs() < 1.0);
    }

    #[test]
    fn checkpoints_written_when_requested() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_experiment(MethodName::Pinda);
        config.seeds = vec![3];
        config.checkpoint_dir = Some(dir.path().to_path_buf());
        run_experiment(&config).unwrap();
        let path = dir.path().join("seed_3.json");
        assert!(path.exists());
        let report = evaluate_checkpoint(&config, &path).unwrap();
        assert!(report.knn.mean.is_finite());
    }
}
