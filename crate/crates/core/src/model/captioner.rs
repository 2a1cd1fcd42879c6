//! The image captioner: patch encoder, optional query bridge, and a causal
//! text decoder that cross-attends to the visual context.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::lora::{LoraConfig, LoraRuntime};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::config::{Architecture, ModelConfig};
use super::encoder;
use super::forward::{init_attention, init_mlp, Forward};
use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stack {
    Encoder,
    Bridge,
    Decoder,
}

impl Stack {
    pub fn prefix(self) -> &'static str {
        match self {
            Stack::Encoder => "encoder",
            Stack::Bridge => "bridge",
            Stack::Decoder => "decoder",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    SelfAttn,
    CrossAttn,
}

/// One of the four projections of an attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WeightKind {
    #[serde(rename = "q")]
    Query,
    #[serde(rename = "k")]
    Key,
    #[serde(rename = "v")]
    Value,
    #[serde(rename = "o")]
    Output,
}

impl WeightKind {
    pub const ALL: [WeightKind; 4] = [Self::Query, Self::Key, Self::Value, Self::Output];

    pub fn short(self) -> &'static str {
        match self {
            Self::Query => "q",
            Self::Key => "k",
            Self::Value => "v",
            Self::Output => "o",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "q" | "w_q" | "wq" | "query" => Ok(Self::Query),
            "k" | "w_k" | "wk" | "key" => Ok(Self::Key),
            "v" | "w_v" | "wv" | "value" => Ok(Self::Value),
            "o" | "w_o" | "wo" | "output" => Ok(Self::Output),
            other => Err(Error::Config(format!("unknown attention weight kind `{other}`"))),
        }
    }
}

impl fmt::Display for WeightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

/// Location of one attention layer's W_q, W_k, W_v, W_o.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionWeights {
    pub stack: Stack,
    pub block: usize,
    pub kind: LayerKind,
    /// e.g. `decoder.blocks.1.cross_attn`
    pub prefix: String,
}

impl AttentionWeights {
    /// Hierarchical name of a projection, without the `.weight` suffix.
    pub fn projection(&self, w: WeightKind) -> String {
        format!("{}.{}", self.prefix, w.short())
    }

    pub fn weight_name(&self, w: WeightKind) -> String {
        format!("{}.weight", self.projection(w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionerModel {
    config: ModelConfig,
    params: ParamStore,
    lora: Option<LoraConfig>,
    seed: u64,
}

impl CaptionerModel {
    /// Random initialization: weights N(0, 0.02²), biases zero, layer-norm
    /// gains one. Trainability follows the architecture: cross-attention
    /// fusion trains only the decoder cross-attention layers; the query
    /// bridge trains only its query tokens and bridge layers.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(seed, "init");
        let mut params = ParamStore::new();
        let d = config.d_model;
        let qb = config.architecture == Architecture::QueryBridge;

        encoder::init(&mut params, &config, &mut rng, false)?;

        if qb {
            params.init_normal(
                "bridge.query_tokens".into(),
                &[config.n_query_tokens, d],
                &mut rng,
                true,
            )?;
            for i in 0..config.bridge_layers {
                let b = format!("bridge.blocks.{i}");
                params.init_layer_norm(&format!("{b}.ln_self"), d, true)?;
                init_attention(&mut params, &format!("{b}.self_attn"), d, &mut rng, true)?;
                params.init_layer_norm(&format!("{b}.ln_cross"), d, true)?;
                init_attention(&mut params, &format!("{b}.cross_attn"), d, &mut rng, true)?;
                params.init_layer_norm(&format!("{b}.ln_mlp"), d, true)?;
                init_mlp(&mut params, &format!("{b}.mlp"), d, config.mlp_ratio, &mut rng, true)?;
            }
            params.init_layer_norm("bridge.ln_final", d, true)?;
        }

        params.init_normal("decoder.token_embed".into(), &[config.vocab_size, d], &mut rng, false)?;
        params.init_normal(
            "decoder.pos_embed".into(),
            &[config.max_caption_len, d],
            &mut rng,
            false,
        )?;
        let cross_trainable = !qb;
        for i in 0..config.decoder_layers {
            let b = format!("decoder.blocks.{i}");
            params.init_layer_norm(&format!("{b}.ln_self"), d, false)?;
            init_attention(&mut params, &format!("{b}.self_attn"), d, &mut rng, false)?;
            params.init_layer_norm(&format!("{b}.ln_cross"), d, cross_trainable)?;
            init_attention(&mut params, &format!("{b}.cross_attn"), d, &mut rng, cross_trainable)?;
            params.init_layer_norm(&format!("{b}.ln_mlp"), d, false)?;
            init_mlp(&mut params, &format!("{b}.mlp"), d, config.mlp_ratio, &mut rng, false)?;
        }
        params.init_layer_norm("decoder.ln_final", d, false)?;
        params.init_linear("decoder.lm_head", config.vocab_size, d, &mut rng, false)?;

        Ok(Self {
            config,
            params,
            lora: None,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub(crate) fn set_lora(&mut self, lora_cfg: Option<LoraConfig>) {
        self.lora = lora_cfg;
    }

    /// Adapter scale and dropout when adapters are present.
    pub fn lora_runtime(&self) -> Option<LoraRuntime> {
        self.lora.as_ref().map(LoraConfig::runtime)
    }

    /// Every attention layer in the model, in parameter order.
    pub fn attention_weights(&self) -> Vec<AttentionWeights> {
        let mut out = Vec::new();
        let mut push = |stack: Stack, block: usize, kind: LayerKind| {
            let comp = match kind {
                LayerKind::SelfAttn => "self_attn",
                LayerKind::CrossAttn => "cross_attn",
            };
            out.push(AttentionWeights {
                stack,
                block,
                kind,
                prefix: format!("{}.blocks.{block}.{comp}", stack.prefix()),
            });
        };
        for i in 0..self.config.encoder_layers {
            push(Stack::Encoder, i, LayerKind::SelfAttn);
        }
        if self.config.architecture == Architecture::QueryBridge {
            for i in 0..self.config.bridge_layers {
                push(Stack::Bridge, i, LayerKind::SelfAttn);
                push(Stack::Bridge, i, LayerKind::CrossAttn);
            }
        }
        for i in 0..self.config.decoder_layers {
            push(Stack::Decoder, i, LayerKind::SelfAttn);
            push(Stack::Decoder, i, LayerKind::CrossAttn);
        }
        out
    }

    /// True when some encoder parameter (or encoder adapter) trains, i.e.
    /// encoder outputs cannot be cached across training steps.
    pub fn encoder_trainable(&self) -> bool {
        self.params
            .iter()
            .any(|(n, p)| p.trainable && n.starts_with("encoder."))
    }

    // ----- graph-level forward ----------------------------------------

    pub fn encode_var(&self, f: &mut Forward<'_, '_>, image: &Tensor) -> Result<Var> {
        let patches = encoder::patchify(image, &self.config)?;
        let p = f.g.leaf(patches, false);
        encoder::forward(f, &self.config, p, true)
    }

    pub fn bridge_var(&self, f: &mut Forward<'_, '_>, enc: Var) -> Result<Var> {
        let (n, d) = f.g.value(enc).dims2()?;
        if d != self.config.d_model || n == 0 {
            return Err(Error::shape(
                "bridge",
                &[n, d],
                &[self.config.n_patches(), self.config.d_model],
            ));
        }
        match self.config.architecture {
            Architecture::CrossAttnFusion => Ok(enc),
            Architecture::QueryBridge => {
                let mut q = f.param("bridge.query_tokens")?;
                for i in 0..self.config.bridge_layers {
                    let b = format!("bridge.blocks.{i}");
                    q = f.attn_sublayer(q, None, &b, "ln_self", self.config.n_heads, false)?;
                    q = f.attn_sublayer(q, Some(enc), &b, "ln_cross", self.config.n_heads, false)?;
                    q = f.mlp_sublayer(q, &b)?;
                }
                f.layer_norm(q, "bridge.ln_final")
            }
        }
    }

    pub fn check_prefix(&self, prefix: &[usize]) -> Result<()> {
        if prefix.is_empty() {
            return Err(Error::Input("caption prefix is empty".into()));
        }
        if prefix.len() > self.config.max_caption_len {
            return Err(Error::Input(format!(
                "caption prefix of length {} exceeds max_caption_len {}",
                prefix.len(),
                self.config.max_caption_len
            )));
        }
        if let Some(&t) = prefix.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {t} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Teacher-forced decoder pass: `[len(prefix), vocab_size]` logits.
    pub fn decode_var(&self, f: &mut Forward<'_, '_>, ctx: Var, prefix: &[usize]) -> Result<Var> {
        self.check_prefix(prefix)?;
        let (n_ctx, d) = f.g.value(ctx).dims2()?;
        if n_ctx == 0 || d != self.config.d_model {
            return Err(Error::Input(format!(
                "decoder context must be a non-empty [n, {}] matrix, got [{n_ctx}, {d}]",
                self.config.d_model
            )));
        }
        let emb = f.param("decoder.token_embed")?;
        let pos = f.param("decoder.pos_embed")?;
        let tok = f.g.gather_rows(emb, prefix)?;
        let pos = f.g.slice_rows(pos, 0, prefix.len())?;
        let mut x = f.g.add(tok, pos)?;
        for i in 0..self.config.decoder_layers {
            let b = format!("decoder.blocks.{i}");
            x = f.attn_sublayer(x, None, &b, "ln_self", self.config.n_heads, true)?;
            x = f.attn_sublayer(x, Some(ctx), &b, "ln_cross", self.config.n_heads, false)?;
            x = f.mlp_sublayer(x, &b)?;
        }
        let x = f.layer_norm(x, "decoder.ln_final")?;
        f.linear(x, "decoder.lm_head")
    }

    // ----- value-level convenience ------------------------------------

    fn run(&self, body: impl FnOnce(&mut Forward<'_, '_>) -> Result<Var>) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut f = Forward::eval(&mut g, &self.params, self.lora_runtime());
        let out = body(&mut f)?;
        Ok(g.value(out).clone())
    }

    /// `[n_patches, d_model]` encoder tokens.
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        self.run(|f| self.encode_var(f, image))
    }

    /// Encoder tokens without positional embeddings, from precomputed patch
    /// rows. Used to check permutation equivariance.
    pub fn encode_patches(&self, patches: &Tensor, positional: bool) -> Result<Tensor> {
        self.run(|f| {
            let p = f.g.leaf(patches.clone(), false);
            encoder::forward(f, &self.config, p, positional)
        })
    }

    pub fn bridge(&self, enc_tokens: &Tensor) -> Result<Tensor> {
        self.run(|f| {
            let e = f.g.leaf(enc_tokens.clone(), false);
            self.bridge_var(f, e)
        })
    }

    pub fn decode_logits(&self, ctx_tokens: &Tensor, prefix: &[usize]) -> Result<Tensor> {
        self.run(|f| {
            let c = f.g.leaf(ctx_tokens.clone(), false);
            self.decode_var(f, c, prefix)
        })
    }

    /// Decoder context for an image (encoder followed by the bridge).
    pub fn context(&self, image: &Tensor) -> Result<Tensor> {
        self.run(|f| {
            let e = self.encode_var(f, image)?;
            self.bridge_var(f, e)
        })
    }
}
