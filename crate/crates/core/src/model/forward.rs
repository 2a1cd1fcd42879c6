//! Binding a [`ParamStore`] to a [`Graph`] and the transformer building
//! blocks shared by the encoder, the query bridge, the decoder and the
//! patch-transformer baseline.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::lora::{self, LoraRuntime};
use crate::rng::Rng;

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Forward<'g, 'p> {
    pub g: &'g mut Graph<'p>,
    params: &'p ParamStore,
    bindings: Vec<Option<Var>>,
    lora: Option<LoraRuntime>,
    mode: Mode,
    track_grad: bool,
    rng: Option<Rng>,
}

impl<'g, 'p> Forward<'g, 'p> {
    /// Evaluation binding: no gradients, no dropout.
    pub fn eval(g: &'g mut Graph<'p>, params: &'p ParamStore, lora: Option<LoraRuntime>) -> Self {
        Self {
            g,
            params,
            bindings: vec![None; params.len()],
            lora,
            mode: Mode::Eval,
            track_grad: false,
            rng: None,
        }
    }

    /// Training binding: trainable parameters become gradient leaves and
    /// adapter dropout draws from `rng`.
    pub fn train(g: &'g mut Graph<'p>, params: &'p ParamStore, lora: Option<LoraRuntime>, rng: Rng) -> Self {
        Self {
            g,
            params,
            bindings: vec![None; params.len()],
            lora,
            mode: Mode::Train,
            track_grad: true,
            rng: Some(rng),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Graph variable for parameter index `i`, if it was used.
    pub fn binding(&self, i: usize) -> Option<Var> {
        self.bindings[i]
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let (i, p) = self
            .params
            .get_full(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if let Some(v) = self.bindings[i] {
            return Ok(v);
        }
        let v = self.g.leaf_ref(&p.value, p.trainable && self.track_grad);
        self.bindings[i] = Some(v);
        Ok(v)
    }

    /// `x·Wᵀ + b` for the weight at `{prefix}.weight`, plus the low-rank
    /// update when `{prefix}.lora.A` exists.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let xw = self.g.matmul_t(x, w)?;
        let h = self.g.add_row(xw, b)?;
        let Some(rt) = self.lora else { return Ok(h) };
        let a_name = format!("{prefix}.{}", lora::A_SUFFIX);
        if !self.params.contains(&a_name) {
            return Ok(h);
        }
        let a = self.param(&a_name)?;
        let bb = self.param(&format!("{prefix}.{}", lora::B_SUFFIX))?;
        let rng = match self.mode {
            Mode::Train => self.rng.as_mut(),
            Mode::Eval => None,
        };
        let delta = lora::low_rank_delta(self.g, x, a, bb, rt, rng)?;
        self.g.add(h, delta)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        self.g.layer_norm(x, gamma, beta)
    }

    /// Multi-head attention of `queries` over `keys_values`, with
    /// projections under `{prefix}.{q,k,v,o}`.
    pub fn attention(
        &mut self,
        queries: Var,
        keys_values: Var,
        prefix: &str,
        n_heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(queries, &format!("{prefix}.q"))?;
        let k = self.linear(keys_values, &format!("{prefix}.k"))?;
        let v = self.linear(keys_values, &format!("{prefix}.v"))?;
        let d = self.g.value(q).shape()[1];
        let dh = d / n_heads;
        let inv = 1.0 / (dh as f32).sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = self.g.slice_cols(q, h * dh, dh)?;
            let kh = self.g.slice_cols(k, h * dh, dh)?;
            let vh = self.g.slice_cols(v, h * dh, dh)?;
            let scores = self.g.matmul_t(qh, kh)?;
            let scores = self.g.scale(scores, inv);
            let probs = self.g.softmax_rows(scores, causal)?;
            heads.push(self.g.matmul(probs, vh)?);
        }
        let merged = if n_heads == 1 {
            heads[0]
        } else {
            self.g.concat_cols(&heads)?
        };
        self.linear(merged, &format!("{prefix}.o"))
    }

    pub fn mlp(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.fc1"))?;
        let h = self.g.gelu(h);
        self.linear(h, &format!("{prefix}.fc2"))
    }

    /// `x + attention(norm(x), ·)`: pre-norm residual attention sublayer.
    pub fn attn_sublayer(
        &mut self,
        x: Var,
        context: Option<Var>,
        prefix: &str,
        norm: &str,
        n_heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let h = self.layer_norm(x, &format!("{prefix}.{norm}"))?;
        let attn_name = if context.is_some() { "cross_attn" } else { "self_attn" };
        let kv = context.unwrap_or(h);
        let a = self.attention(h, kv, &format!("{prefix}.{attn_name}"), n_heads, causal)?;
        self.g.add(x, a)
    }

    pub fn mlp_sublayer(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.layer_norm(x, &format!("{prefix}.ln_mlp"))?;
        let m = self.mlp(h, &format!("{prefix}.mlp"))?;
        self.g.add(x, m)
    }
}

pub(crate) fn init_attention(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    rng: &mut Rng,
    trainable: bool,
) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        store.init_linear(&format!("{prefix}.{p}"), d, d, rng, trainable)?;
    }
    Ok(())
}

pub(crate) fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    ratio: usize,
    rng: &mut Rng,
    trainable: bool,
) -> Result<()> {
    store.init_linear(&format!("{prefix}.fc1"), d * ratio, d, rng, trainable)?;
    store.init_linear(&format!("{prefix}.fc2"), d, d * ratio, rng, trainable)
}
