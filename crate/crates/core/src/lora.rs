//! Low-rank adapters on attention projections.
//!
//! An adapted projection computes `h = W·x + (α/r)·B·A·drop(x)` where `W`
//! stays frozen and only `A: r×d_in` and `B: d_out×r` train. `B` starts at
//! zero, so a freshly injected model computes exactly what the base model
//! computes.
//!
//! Adapter tensors live in the host model's [`ParamStore`] next to the
//! weight they modify, as `{projection}.lora.A` and `{projection}.lora.B`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{CaptionerModel, LayerKind, Mode, ParamStore, Stack, WeightKind, INIT_STD};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tensor_io;

pub const A_SUFFIX: &str = "lora.A";
pub const B_SUFFIX: &str = "lora.B";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
    pub target_kinds: BTreeSet<WeightKind>,
    /// Stacks whose self-attention layers receive adapters.
    pub sites: BTreeSet<Stack>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.05,
            target_kinds: [WeightKind::Query, WeightKind::Key].into_iter().collect(),
            sites: [Stack::Encoder, Stack::Decoder].into_iter().collect(),
        }
    }
}

impl LoraConfig {
    /// Parses target kinds such as `["q", "k"]`.
    pub fn with_targets(mut self, kinds: &[&str]) -> Result<Self> {
        self.target_kinds = kinds.iter().map(|k| WeightKind::parse(k)).collect::<Result<_>>()?;
        Ok(self)
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub(crate) fn runtime(&self) -> LoraRuntime {
        LoraRuntime {
            scale: self.scale(),
            dropout: self.dropout,
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if self.rank > d_model {
            return Err(Error::Config(format!(
                "LoRA rank {} exceeds d_model {d_model}",
                self.rank
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "LoRA alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "LoRA dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.target_kinds.is_empty() {
            return Err(Error::Config("LoRA needs at least one target kind".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraRuntime {
    pub scale: f32,
    pub dropout: f32,
}

/// `(α/r) · (drop(x)·Aᵀ)·Bᵀ` for row-vector inputs `x: n×d_in`.
/// Dropout applies only when an RNG is supplied (training).
pub(crate) fn low_rank_delta(
    g: &mut Graph<'_>,
    x: Var,
    a: Var,
    b: Var,
    rt: LoraRuntime,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let input = match rng {
        Some(rng) if rt.dropout > 0.0 => {
            let keep = 1.0 - rt.dropout;
            let mask = (0..g.value(x).numel())
                .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            g.mul_const(x, mask)?
        }
        _ => x,
    };
    let down = g.matmul_t(input, a)?;
    let up = g.matmul_t(down, b)?;
    Ok(g.scale(up, rt.scale))
}

/// `h = x·Wᵀ + (α/r)·(drop(x)·Aᵀ)·Bᵀ`; the base path never sees dropout.
pub fn lora_forward(
    g: &mut Graph<'_>,
    x: Var,
    w: Var,
    a: Var,
    b: Var,
    rt: LoraRuntime,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let base = g.matmul_t(x, w)?;
    let delta = low_rank_delta(g, x, a, b, rt, rng)?;
    g.add(base, delta)
}

/// A frozen matrix with its adapter pair, detached from any model.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub name: String,
    /// `d_out × d_in`, frozen.
    pub weight: Tensor,
    /// `r × d_in`
    pub a: Tensor,
    /// `d_out × r`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
}

impl LoraLayer {
    pub fn new(
        name: impl Into<String>,
        weight: Tensor,
        a: Tensor,
        b: Tensor,
        alpha: f32,
        dropout: f32,
    ) -> Result<Self> {
        let (d_out, d_in) = weight.dims2()?;
        let (r, a_in) = a.dims2()?;
        let (b_out, b_r) = b.dims2()?;
        if a_in != d_in || b_out != d_out || b_r != r || weight.rank() != 2 {
            return Err(Error::shape("LoraLayer", weight.shape(), &[r, a_in, b_out, b_r]));
        }
        Ok(Self {
            name: name.into(),
            weight,
            a,
            b,
            rank: r,
            alpha,
            dropout,
        })
    }

    /// Fresh adapter for `weight`: `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn init(
        name: impl Into<String>,
        weight: Tensor,
        rank: usize,
        alpha: f32,
        dropout: f32,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (d_out, d_in) = weight.dims2()?;
        let a = Tensor::randn(&[rank, d_in], INIT_STD, rng);
        Self::new(name, weight, a, Tensor::zeros(&[d_out, rank]), alpha, dropout)
    }

    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn runtime(&self) -> LoraRuntime {
        LoraRuntime {
            scale: self.scale(),
            dropout: self.dropout,
        }
    }

    /// Graph form with `x: n×d_in` rows; `W` is a frozen leaf, `A` and `B`
    /// are returned as trainable leaves `(h, a, b)`.
    pub fn forward_var<'p>(
        &'p self,
        g: &mut Graph<'p>,
        x: Var,
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<(Var, Var, Var)> {
        let w = g.leaf_ref(&self.weight, false);
        let a = g.leaf_ref(&self.a, true);
        let b = g.leaf_ref(&self.b, true);
        let rng = match mode {
            Mode::Train => rng,
            Mode::Eval => None,
        };
        Ok((lora_forward(g, x, w, a, b, self.runtime(), rng)?, a, b))
    }

    /// `h = W·x + (α/r)·B·A·drop(x)` for each row `x` of `x`.
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: Option<&mut Rng>) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let (h, _, _) = self.forward_var(&mut g, xv, mode, rng)?;
        Ok(g.value(h).clone())
    }

    /// `ΔW = (α/r)·B·A`
    pub fn delta_weight(&self) -> Tensor {
        self.b
            .matmul(&self.a)
            .expect("shapes checked at construction")
            .scale(self.scale())
    }

    /// `W' = W + (α/r)·B·A`, a new matrix; the layer is untouched.
    pub fn merge(&self) -> Tensor {
        if self.b.data().iter().all(|&v| v == 0.0) {
            return self.weight.clone();
        }
        self.weight.add(&self.delta_weight()).expect("same shape")
    }
}

/// A captioner with adapters injected into its self-attention projections.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel {
    model: CaptionerModel,
    lora_cfg: LoraConfig,
    /// Adapted projection names, e.g. `encoder.blocks.0.self_attn.q`.
    adapters: Vec<String>,
}

/// Projections that receive adapters under `lora_cfg`, in model order.
fn adapter_sites(model: &CaptionerModel, lora_cfg: &LoraConfig) -> Vec<String> {
    model
        .attention_weights()
        .into_iter()
        .filter(|aw| aw.kind == LayerKind::SelfAttn && lora_cfg.sites.contains(&aw.stack))
        .flat_map(|aw| {
            lora_cfg
                .target_kinds
                .iter()
                .map(move |&k| aw.projection(k))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Freezes every base parameter and adds one zero-initialized adapter per
/// (targeted self-attention layer × target kind).
pub fn inject(mut model: CaptionerModel, lora_cfg: LoraConfig, seed: u64) -> Result<AdaptedModel> {
    lora_cfg.validate(model.config().d_model)?;
    if model.lora_config().is_some() {
        return Err(Error::Config("model already carries adapters".into()));
    }
    let adapters = adapter_sites(&model, &lora_cfg);
    let mut rng = Rng::stream(seed, "lora-init");
    let params = model.params_mut();
    params.freeze_all();
    for name in &adapters {
        let w = params.get(&format!("{name}.weight"))?;
        let (d_out, d_in) = w.dims2()?;
        params.insert(
            format!("{name}.{A_SUFFIX}"),
            Tensor::randn(&[lora_cfg.rank, d_in], INIT_STD, &mut rng),
            true,
        )?;
        params.insert(
            format!("{name}.{B_SUFFIX}"),
            Tensor::zeros(&[d_out, lora_cfg.rank]),
            true,
        )?;
    }
    model.set_lora(Some(lora_cfg.clone()));
    Ok(AdaptedModel {
        model,
        lora_cfg,
        adapters,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterHeader {
    lora_cfg: LoraConfig,
    base_config_hash: String,
    master_seed: u64,
}

/// The JSON header written next to an adapter tensor file.
pub fn adapter_header_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl AdaptedModel {
    pub fn model(&self) -> &CaptionerModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut CaptionerModel {
        &mut self.model
    }

    pub fn into_model(self) -> CaptionerModel {
        self.model
    }

    pub fn lora_cfg(&self) -> &LoraConfig {
        &self.lora_cfg
    }

    pub fn adapter_names(&self) -> &[String] {
        &self.adapters
    }

    /// Standalone copy of one adapted projection.
    pub fn layer(&self, name: &str) -> Result<LoraLayer> {
        if !self.adapters.iter().any(|a| a == name) {
            return Err(Error::UnknownParam(format!("{name}.{A_SUFFIX}")));
        }
        let p = self.model.params();
        LoraLayer::new(
            name,
            p.get(&format!("{name}.weight"))?.clone(),
            p.get(&format!("{name}.{A_SUFFIX}"))?.clone(),
            p.get(&format!("{name}.{B_SUFFIX}"))?.clone(),
            self.lora_cfg.alpha,
            self.lora_cfg.dropout,
        )
    }

    /// Names and element counts of everything the optimizer updates.
    pub fn trainable_parameters(&self) -> Vec<(String, usize)> {
        self.model
            .params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| (n.to_string(), p.value.numel()))
            .collect()
    }

    /// Folds every adapter into its base weight and drops the adapters.
    pub fn merged(&self) -> Result<CaptionerModel> {
        let mut base = CaptionerModel::init(self.model.config().clone(), self.model.seed())?;
        let merged: Vec<(String, Tensor)> = self
            .adapters
            .iter()
            .map(|name| Ok((format!("{name}.weight"), self.layer(name)?.merge())))
            .collect::<Result<_>>()?;
        let src = self.model.params();
        let dst = base.params_mut();
        let names: Vec<String> = dst.names().map(str::to_string).collect();
        for name in names {
            let value = match merged.iter().find(|(n, _)| *n == name) {
                Some((_, w)) => w.clone(),
                None => src.get(&name)?.clone(),
            };
            let p = dst.param_mut(&name)?;
            p.value = value;
            p.trainable = false;
        }
        Ok(base)
    }

    fn adapter_tensors(&self) -> Vec<(String, &Tensor)> {
        self.model
            .params()
            .tensors()
            .filter(|(n, _)| n.ends_with(A_SUFFIX) || n.ends_with(B_SUFFIX))
            .map(|(n, t)| (n.to_string(), t))
            .collect()
    }

    /// Writes only the adapter tensors to `path` plus a JSON header with
    /// the adapter settings, the base configuration hash and the seed.
    pub fn save_adapter(&self, path: &Path) -> Result<()> {
        let tensors = self.adapter_tensors();
        tensor_io::save(path, tensors.iter().map(|(n, t)| (n.as_str(), *t)))?;
        let header = AdapterHeader {
            lora_cfg: self.lora_cfg.clone(),
            base_config_hash: self.model.config().hash(),
            master_seed: self.model.seed(),
        };
        let hp = adapter_header_path(path);
        fs::write(&hp, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&hp, e))
    }

    /// Re-creates an adapted model from `base` and a saved adapter.
    pub fn load_adapter(base: CaptionerModel, path: &Path) -> Result<AdaptedModel> {
        let hp = adapter_header_path(path);
        let raw = fs::read(&hp).map_err(|e| Error::io(&hp, e))?;
        let header: AdapterHeader = serde_json::from_slice(&raw)?;
        let actual = base.config().hash();
        if header.base_config_hash != actual {
            return Err(Error::ConfigHash {
                saved: header.base_config_hash,
                actual,
            });
        }
        let tensors = tensor_io::load(path)?;
        let mut adapted = inject(base, header.lora_cfg, header.master_seed)?;
        let expected = adapted.adapter_tensors().len();
        if tensors.len() != expected {
            return Err(Error::Corrupt(format!(
                "adapter file has {} tensors, configuration implies {expected}",
                tensors.len()
            )));
        }
        let params: &mut ParamStore = adapted.model.params_mut();
        for (name, t) in tensors {
            let p = params.param_mut(&name)?;
            if p.value.shape() != t.shape() {
                return Err(Error::shape("load_adapter", p.value.shape(), t.shape()));
            }
            p.value = t;
        }
        Ok(adapted)
    }
}
