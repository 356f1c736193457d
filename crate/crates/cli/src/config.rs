//! Declarative experiment configuration: one self-describing JSON document
//! per run. Defaults mirror the reference hyperparameters (temperature 0.1,
//! Adam at 1e-3, batch 256, kNN k = 5, probe epochs 50).

use std::path::{Path, PathBuf};

use pinda_core::contrastive::{ContrastiveConfig, EncoderConfig, PositiveLossVariant};
use pinda_core::eval::EvalSettings;
use pinda_core::train::{AdamConfig, Augmentation, GeneratorSpec, Method, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::data::{RescaleMode, SyntheticSpec};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Csv {
        train_path: PathBuf,
        #[serde(default)]
        test_path: Option<PathBuf>,
        #[serde(default)]
        has_header: bool,
        #[serde(default = "default_true")]
        has_labels: bool,
    },
    Synthetic(SyntheticSpec),
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Pinda,
    RandomNoise,
    SimclReprNoise,
    PlainInfonce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKindName {
    GaussianZeroMean,
    GaussianLearnedMean,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationConfig {
    GaussianJitter { sigma: f64 },
    FeatureDropout { p: f64 },
    Identity,
}

impl AugmentationConfig {
    fn to_core(&self) -> Augmentation {
        match self {
            AugmentationConfig::GaussianJitter { sigma } => {
                Augmentation::GaussianJitter { sigma: *sigma }
            }
            AugmentationConfig::FeatureDropout { p } => Augmentation::FeatureDropout { p: *p },
            AugmentationConfig::Identity => Augmentation::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub repr_dim: usize,
    pub proj_hidden_dim: usize,
    pub proj_dim: usize,
    pub generator_hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 1024,
            repr_dim: 256,
            proj_hidden_dim: 256,
            proj_dim: 128,
            generator_hidden_dim: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub temperature: f64,
    pub variant: VariantName,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda_norm: f64,
    pub mc_samples: usize,
    pub sigma_floor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            temperature: 0.1,
            variant: VariantName::Simclr,
            batch_size: 256,
            epochs: 200,
            learning_rate: 1e-3,
            lambda_norm: 1.0,
            mc_samples: 1,
            sigma_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Simclr,
    MemoryBank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub k: usize,
    pub sr_epochs: usize,
    pub sr_batch_size: usize,
    pub sr_learning_rate: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k: 5, sr_epochs: 50, sr_batch_size: 256, sr_learning_rate: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    #[serde(default = "default_rescale")]
    pub rescale: RescaleMode,
    pub method: MethodName,
    #[serde(default = "default_noise_kind")]
    pub noise_kind: NoiseKindName,
    #[serde(default)]
    pub augmentations: Vec<AugmentationConfig>,
    #[serde(default = "default_simcl_scale")]
    pub simcl_scale: f64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_split_fraction")]
    pub split_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

fn default_rescale() -> RescaleMode {
    RescaleMode::Standardize
}

fn default_noise_kind() -> NoiseKindName {
    NoiseKindName::GaussianZeroMean
}

fn default_simcl_scale() -> f64 {
    1.0
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_split_fraction() -> f64 {
    0.8
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config(String::from("at least one seed is required")));
        }
        if self.train.temperature <= 0.0 {
            return Err(CliError::Config(String::from("temperature must be positive")));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(CliError::Config(String::from(
                "batch_size and epochs must be positive",
            )));
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical JSON form, hex-encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in json.as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }

    pub fn method_of(&self) -> Method {
        match self.method {
            MethodName::Pinda => Method::Pinda {
                generator: match self.noise_kind {
                    NoiseKindName::GaussianZeroMean => GeneratorSpec::GaussianZeroMean,
                    NoiseKindName::GaussianLearnedMean => GeneratorSpec::GaussianLearnedMean,
                    NoiseKindName::Uniform => GeneratorSpec::Uniform,
                },
                predefined: self.augmentations.iter().map(|a| a.to_core()).collect(),
            },
            // The untrained counterpart of the learned-noise setup: standard
            // Gaussian noise on rescaled features as the second augmentation.
            MethodName::RandomNoise => Method::PlainInfonce {
                augmentations: vec![
                    Augmentation::Identity,
                    Augmentation::GaussianJitter { sigma: 1.0 },
                ],
            },
            MethodName::SimclReprNoise => Method::SimclReprNoise { scale: self.simcl_scale },
            MethodName::PlainInfonce => Method::PlainInfonce {
                augmentations: self.augmentations.iter().map(|a| a.to_core()).collect(),
            },
        }
    }

    /// Core training configuration for one run seed.
    pub fn train_config(&self, input_dim: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            encoder: EncoderConfig {
                input_dim,
                hidden_dim: self.model.hidden_dim,
                repr_dim: self.model.repr_dim,
                proj_hidden_dim: self.model.proj_hidden_dim,
                proj_dim: self.model.proj_dim,
            },
            generator_hidden_dim: self.model.generator_hidden_dim,
            sigma_floor: self.train.sigma_floor,
            contrastive: ContrastiveConfig {
                temperature: self.train.temperature,
                variant: match self.train.variant {
                    VariantName::Simclr => PositiveLossVariant::Simclr,
                    VariantName::MemoryBank => PositiveLossVariant::MemoryBank,
                },
            },
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed,
            lambda_norm: self.train.lambda_norm,
            mc_samples: self.train.mc_samples,
            adam: AdamConfig { learning_rate: self.train.learning_rate, ..AdamConfig::default() },
            method: self.method_of(),
        }
    }

    /// Evaluation protocol with a single run seed.
    pub fn eval_settings(&self, seed: u64) -> EvalSettings {
        EvalSettings {
            k: self.eval.k,
            sr_epochs: self.eval.sr_epochs,
            sr_batch_size: self.eval.sr_batch_size,
            sr_learning_rate: self.eval.sr_learning_rate,
            seeds: vec![seed],
        }
    }
}
