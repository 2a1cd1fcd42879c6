//! Named parameter tensors with a per-parameter trainability flag.

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Insertion-ordered map from hierarchical names (`encoder.blocks.0.attn.q.weight`)
/// to parameters. The order is the initialization order and the
/// serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.param(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub(crate) fn get_full(&self, name: &str) -> Option<(usize, &Param)> {
        self.entries.get_full(name).map(|(i, _, p)| (i, p))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.param_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Indices (in store order) of trainable parameters.
    pub fn trainable_indices(&self) -> Vec<usize> {
        self.entries
            .values()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n).collect()
    }

    /// Mutable values of the trainable parameters, in store order.
    pub fn trainable_values_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries
            .values_mut()
            .filter(|p| p.trainable)
            .map(|p| &mut p.value)
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn numel_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn mask(&self) -> IndexMap<String, bool> {
        self.entries.iter().map(|(k, p)| (k.clone(), p.trainable)).collect()
    }

    /// Applies a saved trainability mask; it must cover exactly this store.
    pub fn apply_mask(&mut self, mask: &IndexMap<String, bool>) -> Result<()> {
        if mask.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "trainability mask covers {} parameters, model has {}",
                mask.len(),
                self.entries.len()
            )));
        }
        for (name, &t) in mask {
            self.set_trainable(name, t)?;
        }
        Ok(())
    }

    /// SHA-256 over the names, shapes and bytes of the selected parameters.
    pub fn digest(&self, select: impl Fn(&str, &Param) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.entries.iter().filter(|(n, p)| select(n, p)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn frozen_digest(&self) -> String {
        self.digest(|_, p| !p.trainable)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    /// Overwrites values from `tensors`; names and shapes must match exactly.
    pub fn load_values(&mut self, tensors: IndexMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for (name, t) in tensors {
            let p = self.param_mut(&name)?;
            if p.value.shape() != t.shape() {
                return Err(Error::shape("load_values", p.value.shape(), t.shape()));
            }
            p.value = t;
        }
        Ok(())
    }

    // ----- initialization helpers -------------------------------------

    pub(crate) fn init_normal(&mut self, name: String, shape: &[usize], rng: &mut Rng, trainable: bool) -> Result<()> {
        self.insert(name, Tensor::randn(shape, INIT_STD, rng), trainable)
    }

    /// `{prefix}.weight` as `[out, in]` from N(0, 0.02²) and a zero `{prefix}.bias`.
    pub(crate) fn init_linear(
        &mut self,
        prefix: &str,
        out: usize,
        inp: usize,
        rng: &mut Rng,
        trainable: bool,
    ) -> Result<()> {
        self.init_normal(format!("{prefix}.weight"), &[out, inp], rng, trainable)?;
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]), trainable)
    }

    pub(crate) fn init_layer_norm(&mut self, prefix: &str, n: usize, trainable: bool) -> Result<()> {
        self.insert(format!("{prefix}.gamma"), Tensor::ones(&[n]), trainable)?;
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[n]), trainable)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
