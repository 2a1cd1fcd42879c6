//! The five comparable model kinds and their on-disk checkpoints: a
//! CAPDET-TENSORS file plus a JSON sidecar with everything needed to
//! rebuild the model before its values are loaded.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::baselines::{build_baseline, fit_baseline, BaselineClassifier, BaselineKind};
use crate::caption::{self, vocabulary, Label};
use crate::dataset::Manifest;
use crate::error::{Error, Result};
use crate::lora::{inject, AdaptedModel, LoraConfig};
use crate::metrics::Detector;
use crate::model::{Architecture, CaptionerModel, ModelConfig, ParamStore};
use crate::tensor::Tensor;
use crate::tensor_io;
use crate::train::{EpochRecord, History, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "conv")]
    Conv,
    #[serde(rename = "patch")]
    Patch,
    #[serde(rename = "xattn")]
    Xattn,
    #[serde(rename = "qb")]
    Qb,
    #[serde(rename = "lora-qb")]
    LoraQb,
}

impl ModelKind {
    /// Comparison order; also the bit order of agreement codes.
    pub const ALL: [ModelKind; 5] = [Self::Conv, Self::Patch, Self::Xattn, Self::Qb, Self::LoraQb];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Conv => "conv",
            Self::Patch => "patch",
            Self::Xattn => "xattn",
            Self::Qb => "qb",
            Self::LoraQb => "lora-qb",
        }
    }

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Self::Conv => Some(BaselineKind::Conv),
            Self::Patch => Some(BaselineKind::PatchTransformer),
            _ => None,
        }
    }

    pub fn architecture(self) -> Architecture {
        match self {
            Self::Xattn => Architecture::CrossAttnFusion,
            _ => Architecture::QueryBridge,
        }
    }

    /// Position in [`ModelKind::ALL`].
    pub fn order(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap_or(usize::MAX)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown model kind `{s}` (expected conv, patch, xattn, qb or lora-qb)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Captioner(CaptionerModel),
    Adapted(AdaptedModel),
    Baseline(BaselineClassifier),
}

/// Freshly initialized model of `kind`. The architecture field of `config`
/// is overridden to match the kind.
pub fn build_model(kind: ModelKind, config: &ModelConfig, lora: &LoraConfig, seed: u64) -> Result<TrainedModel> {
    let config = ModelConfig {
        architecture: kind.architecture(),
        ..config.clone()
    };
    Ok(match kind {
        ModelKind::Conv | ModelKind::Patch => {
            TrainedModel::Baseline(build_baseline(kind.baseline().expect("baseline kind"), config, seed)?)
        }
        ModelKind::Xattn | ModelKind::Qb => TrainedModel::Captioner(CaptionerModel::init(config, seed)?),
        ModelKind::LoraQb => TrainedModel::Adapted(inject(CaptionerModel::init(config, seed)?, lora.clone(), seed)?),
    })
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Captioner(m) => match m.config().architecture {
                Architecture::CrossAttnFusion => ModelKind::Xattn,
                Architecture::QueryBridge => ModelKind::Qb,
            },
            Self::Adapted(_) => ModelKind::LoraQb,
            Self::Baseline(b) => match b.kind() {
                BaselineKind::Conv => ModelKind::Conv,
                BaselineKind::PatchTransformer => ModelKind::Patch,
            },
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Self::Captioner(m) => m.config(),
            Self::Adapted(a) => a.model().config(),
            Self::Baseline(b) => b.config(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Self::Captioner(m) => m.params(),
            Self::Adapted(a) => a.model().params(),
            Self::Baseline(b) => b.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::Captioner(m) => m.params_mut(),
            Self::Adapted(a) => a.model_mut().params_mut(),
            Self::Baseline(b) => b.params_mut(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::Captioner(m) => m.seed(),
            Self::Adapted(a) => a.model().seed(),
            Self::Baseline(b) => b.seed(),
        }
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        match self {
            Self::Adapted(a) => Some(a.lora_cfg()),
            _ => None,
        }
    }

    pub fn fit(
        &mut self,
        manifest: &Manifest,
        cfg: &TrainConfig,
        on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<History> {
        match self {
            Self::Captioner(m) => caption::fit(m, manifest, cfg, on_epoch),
            Self::Adapted(a) => caption::fit(a.model_mut(), manifest, cfg, on_epoch),
            Self::Baseline(b) => fit_baseline(b, manifest, cfg, on_epoch),
        }
    }
}

impl Detector for TrainedModel {
    fn detect(&self, image: &Tensor) -> Result<Label> {
        match self {
            Self::Captioner(m) => m.detect(image),
            Self::Adapted(a) => a.model().detect(image),
            Self::Baseline(b) => b.detect(image),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraConfig>,
    /// Parameter name → trainable, in store order.
    pub mask: IndexMap<String, bool>,
    /// Token strings by id; empty for binary classifiers.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vocabulary: Vec<String>,
    pub master_seed: u64,
}

/// Sidecar path for a checkpoint tensor file: same stem, `.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    let params = model.params();
    tensor_io::save(path, params.tensors())?;
    let meta = CheckpointMeta {
        kind: model.kind(),
        config: model.config().clone(),
        config_hash: model.config().hash(),
        lora: model.lora_config().cloned(),
        mask: params.mask(),
        vocabulary: match model {
            TrainedModel::Baseline(_) => Vec::new(),
            _ => vocabulary(model.config().vocab_size),
        },
        master_seed: model.seed(),
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&sp, e))
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    let sp = sidecar_path(path);
    let raw = fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
    Ok(serde_json::from_slice(&raw)?)
}

/// Rebuilds the model described by the sidecar, then loads its values and
/// trainability mask. The stored configuration hash must match.
pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let meta = load_meta(path)?;
    let actual = meta.config.hash();
    if meta.config_hash != actual {
        return Err(Error::ConfigHash {
            saved: meta.config_hash,
            actual,
        });
    }
    if meta.kind.architecture() != meta.config.architecture {
        return Err(Error::Corrupt(format!(
            "checkpoint kind {} does not match architecture {:?}",
            meta.kind, meta.config.architecture
        )));
    }
    let lora = match (meta.kind, meta.lora) {
        (ModelKind::LoraQb, Some(lora_cfg)) => lora_cfg,
        (ModelKind::LoraQb, None) => {
            return Err(Error::Corrupt("lora-qb checkpoint without a lora configuration".into()))
        }
        (_, Some(_)) => {
            return Err(Error::Corrupt(format!(
                "{} checkpoint carries a lora configuration",
                meta.kind
            )))
        }
        (_, None) => LoraConfig::default(),
    };
    let mut model = build_model(meta.kind, &meta.config, &lora, meta.master_seed)?;
    let tensors = tensor_io::load(path)?;
    let params = model.params_mut();
    params.load_values(tensors)?;
    params.apply_mask(&meta.mask)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        assert!("blip".parse::<ModelKind>().is_err());
    }

    #[test]
    fn built_kind_matches_request() {
        let cfg = ModelConfig::default();
        for k in ModelKind::ALL {
            let m = build_model(k, &cfg, &LoraConfig::default(), 1).unwrap();
            assert_eq!(m.kind(), k);
        }
    }
}
