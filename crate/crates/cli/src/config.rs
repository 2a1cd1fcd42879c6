//! Flat key/value run configuration.
//!
//! Precedence, lowest first: built-in defaults, the config file,
//! `CAPDET_SEED`, then `--set key=value` overrides.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use capdet_core::checkpoint::ModelKind;
use capdet_core::dataset::{CorpusConfig, MANIFEST_FILE};
use capdet_core::lora::LoraConfig;
use capdet_core::model::{ModelConfig, Stack, WeightKind};
use capdet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "CAPDET_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: corpus, initialization, shuffling and dropout.
    pub seed: u64,

    pub corpus_dir: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,

    pub model: ModelKind,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub bridge_layers: usize,
    pub n_query_tokens: usize,
    pub mlp_ratio: usize,

    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub lora_dropout: f32,
    pub lora_targets: BTreeSet<WeightKind>,
    pub lora_sites: BTreeSet<Stack>,

    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,

    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let model = ModelConfig::default();
        let lora = LoraConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: corpus.seed,
            corpus_dir: PathBuf::from("data"),
            n_train: corpus.n_train,
            n_test: corpus.n_test,
            image_size: corpus.image_size,
            model: ModelKind::LoraQb,
            patch_size: model.patch_size,
            d_model: model.d_model,
            n_heads: model.n_heads,
            encoder_layers: model.encoder_layers,
            decoder_layers: model.decoder_layers,
            bridge_layers: model.bridge_layers,
            n_query_tokens: model.n_query_tokens,
            mlp_ratio: model.mlp_ratio,
            lora_rank: lora.rank,
            lora_alpha: lora.alpha,
            lora_dropout: lora.dropout,
            lora_targets: lora.target_kinds,
            lora_sites: lora.sites,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
            run_dir: PathBuf::from("runs/lora-qb"),
        }
    }
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Resolves the effective configuration.
    pub fn load(file: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        if let Some(seed) = env_seed {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{seed}`")))?;
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{o}`")))?;
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid configuration: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.corpus().validate()?;
        self.model_config().validate()?;
        self.train().validate()?;
        if self.model == ModelKind::LoraQb {
            self.lora().validate(self.d_model)?;
        }
        Ok(())
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            n_train: self.n_train,
            n_test: self.n_test,
            image_size: self.image_size,
            seed: self.seed,
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.corpus_dir.join(MANIFEST_FILE)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            bridge_layers: self.bridge_layers,
            n_query_tokens: self.n_query_tokens,
            mlp_ratio: self.mlp_ratio,
            architecture: self.model.architecture(),
            ..ModelConfig::default()
        }
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            dropout: self.lora_dropout,
            target_kinds: self.lora_targets.clone(),
            sites: self.lora_sites.clone(),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
