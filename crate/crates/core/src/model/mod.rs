//! Tiny vision encoder, text decoder and the two fusion architectures.

mod captioner;
mod config;
pub mod encoder;
mod forward;
mod params;

pub use captioner::{AttentionWeights, CaptionerModel, LayerKind, Stack, WeightKind};
pub use config::{Architecture, ModelConfig};
pub use forward::{Forward, Mode};
pub use params::{Param, ParamStore, INIT_STD};
