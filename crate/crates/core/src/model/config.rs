use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::hex;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Decoder cross-attends directly to every encoder patch token; only the
    /// cross-attention layers train.
    CrossAttnFusion,
    /// A small stack of learnable query tokens reads the frozen encoder
    /// output and hands the decoder a short context sequence.
    QueryBridge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub bridge_layers: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    pub n_query_tokens: usize,
    pub mlp_ratio: usize,
    pub architecture: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            d_model: 64,
            n_heads: 4,
            encoder_layers: 4,
            decoder_layers: 2,
            bridge_layers: 2,
            vocab_size: 40,
            max_caption_len: 4,
            n_query_tokens: 8,
            mlp_ratio: 4,
            architecture: Architecture::QueryBridge,
        }
    }
}

impl ModelConfig {
    pub fn with_architecture(architecture: Architecture) -> Self {
        Self {
            architecture,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.channels != 3 {
            return fail(format!("channels must be 3, got {}", self.channels));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_caption_len < 3 {
            return fail(format!(
                "max_caption_len must be at least 3 (BOS, label, EOS), got {}",
                self.max_caption_len
            ));
        }
        if self.vocab_size < crate::caption::FIRST_FILLER_ID {
            return fail(format!(
                "vocab_size must be at least {}, got {}",
                crate::caption::FIRST_FILLER_ID,
                self.vocab_size
            ));
        }
        if self.architecture == Architecture::QueryBridge && self.n_query_tokens == 0 {
            return fail("query-bridge models need at least one query token".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Stable identifier of the configuration (SHA-256 of its JSON form).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}
