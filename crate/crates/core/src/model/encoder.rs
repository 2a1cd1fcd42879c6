//! ViT-style patch encoder, shared by the captioners and the
//! patch-transformer baseline.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::forward::{init_attention, init_mlp, Forward};
use super::params::ParamStore;

pub const PREFIX: &str = "encoder";

/// Splits a channel-first `[3, d, d]` image into `[n_patches, 3·p·p]` rows.
/// Patches are numbered row-major over the grid; each row holds channel,
/// then patch row, then patch column.
pub fn patchify(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let d = cfg.image_size;
    let expect = [cfg.channels, d, d];
    if image.shape() != expect {
        return Err(Error::shape("encode_image", image.shape(), &expect));
    }
    let (p, grid) = (cfg.patch_size, cfg.grid());
    let src = image.data();
    let mut out = Vec::with_capacity(image.numel());
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..cfg.channels {
                for py in 0..p {
                    let row = c * d * d + (gy * p + py) * d + gx * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new(&[cfg.n_patches(), cfg.patch_dim()], out)
}

pub(crate) fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng, trainable: bool) -> Result<()> {
    let d = cfg.d_model;
    store.init_linear(&format!("{PREFIX}.patch_embed"), d, cfg.patch_dim(), rng, trainable)?;
    store.init_normal(format!("{PREFIX}.pos_embed"), &[cfg.n_patches(), d], rng, trainable)?;
    for i in 0..cfg.encoder_layers {
        let b = format!("{PREFIX}.blocks.{i}");
        store.init_layer_norm(&format!("{b}.ln_self"), d, trainable)?;
        init_attention(store, &format!("{b}.self_attn"), d, rng, trainable)?;
        store.init_layer_norm(&format!("{b}.ln_mlp"), d, trainable)?;
        init_mlp(store, &format!("{b}.mlp"), d, cfg.mlp_ratio, rng, trainable)?;
    }
    store.init_layer_norm(&format!("{PREFIX}.ln_final"), d, trainable)
}

/// Patch rows → encoder tokens `[n_patches, d_model]`.
pub(crate) fn forward(f: &mut Forward<'_, '_>, cfg: &ModelConfig, patches: Var, positional: bool) -> Result<Var> {
    let mut x = f.linear(patches, &format!("{PREFIX}.patch_embed"))?;
    if positional {
        let pos = f.param(&format!("{PREFIX}.pos_embed"))?;
        x = f.g.add(x, pos)?;
    }
    for i in 0..cfg.encoder_layers {
        let b = format!("{PREFIX}.blocks.{i}");
        x = f.attn_sublayer(x, None, &b, "ln_self", cfg.n_heads, false)?;
        x = f.mlp_sublayer(x, &b)?;
    }
    f.layer_norm(x, &format!("{PREFIX}.ln_final"))
}
