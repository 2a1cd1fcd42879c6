//! Binary classifiers with a single-logit head: a small strided CNN and a
//! patch transformer built from the captioner's encoder blocks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Var};
use crate::caption::Label;
use crate::dataset::{Manifest, Split};
use crate::error::{Error, Result};
use crate::model::{encoder, Forward, ModelConfig, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{self, load_split, EpochRecord, History, Learner, TrainConfig};

/// Output channels of the three stride-2 convolutions.
pub const CONV_CHANNELS: [usize; 3] = [16, 32, 32];
const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Conv,
    PatchTransformer,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Conv => "conv",
            Self::PatchTransformer => "patch_transformer",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(Self::Conv),
            "patch_transformer" | "patch" => Ok(Self::PatchTransformer),
            _ => Err(Error::Config(format!("unknown baseline kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryPrediction {
    pub label: Label,
    pub p_fake: f64,
}

impl BinaryPrediction {
    /// Fake iff `σ(logit) ≥ 0.5`, i.e. iff `logit ≥ 0`.
    pub fn from_logit(logit: f32) -> Self {
        let p_fake = 1.0 / (1.0 + (-f64::from(logit)).exp());
        let label = if p_fake >= 0.5 { Label::Fake } else { Label::Real };
        Self { label, p_fake }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineClassifier {
    kind: BaselineKind,
    config: ModelConfig,
    params: ParamStore,
    seed: u64,
}

fn conv_geoms(cfg: &ModelConfig) -> Vec<ConvGeom> {
    let mut geoms = Vec::new();
    let (mut size, mut channels) = (cfg.image_size, cfg.channels);
    for &out in &CONV_CHANNELS {
        let g = ConvGeom {
            height: size,
            width: size,
            channels,
            kernel: KERNEL,
            stride: 2,
            pad: 1,
        };
        size = g.out_height();
        channels = out;
        geoms.push(g);
    }
    geoms
}

/// `[c, h, w]` → `[h·w, c]`.
fn to_pixel_major(image: &Tensor) -> Result<Tensor> {
    let [c, h, w] = image.shape() else {
        return Err(Error::shape("baseline input", image.shape(), &[3, 0, 0]));
    };
    image.clone().reshape(&[*c, h * w])?.transpose()
}

/// Builds a classifier with every parameter trainable. Convolutions use
/// He-normal weights; everything else follows the captioner convention.
pub fn build_baseline(kind: BaselineKind, config: ModelConfig, seed: u64) -> Result<BaselineClassifier> {
    config.validate()?;
    let mut rng = Rng::stream(seed, "baseline-init");
    let mut params = ParamStore::new();
    let d_feat = match kind {
        BaselineKind::Conv => {
            if conv_geoms(&config).iter().any(|g| g.height < 2) {
                return Err(Error::Config(format!(
                    "image_size {} is too small for the conv stack",
                    config.image_size
                )));
            }
            for (i, g) in conv_geoms(&config).iter().enumerate() {
                let fan_in = g.patch_len();
                let std = (2.0 / fan_in as f32).sqrt();
                let out = CONV_CHANNELS[i];
                params.insert(
                    format!("backbone.conv{i}.weight"),
                    Tensor::randn(&[out, fan_in], std, &mut rng),
                    true,
                )?;
                params.insert(format!("backbone.conv{i}.bias"), Tensor::zeros(&[out]), true)?;
            }
            CONV_CHANNELS[CONV_CHANNELS.len() - 1]
        }
        BaselineKind::PatchTransformer => {
            encoder::init(&mut params, &config, &mut rng, true)?;
            config.d_model
        }
    };
    params.init_linear("head", 1, d_feat, &mut rng, true)?;
    Ok(BaselineClassifier {
        kind,
        config,
        params,
        seed,
    })
}

impl BaselineClassifier {
    pub fn kind(&self) -> BaselineKind {
        self.kind
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

    /// Width of the pooled feature vector feeding the head.
    pub fn feature_dim(&self) -> usize {
        self.params.get("head.weight").map_or(0, |w| w.shape()[1])
    }

    /// `[1, 1]` logit for one `[3, d, d]` image.
    pub fn logit_var(&self, f: &mut Forward<'_, '_>, image: &Tensor) -> Result<Var> {
        let expect = [self.config.channels, self.config.image_size, self.config.image_size];
        if image.shape() != expect {
            return Err(Error::shape("baseline input", image.shape(), &expect));
        }
        let features = match self.kind {
            BaselineKind::Conv => {
                let mut x = f.g.leaf(to_pixel_major(image)?, false);
                for (i, geom) in conv_geoms(&self.config).into_iter().enumerate() {
                    let cols = f.g.im2col(x, geom)?;
                    let h = f.linear(cols, &format!("backbone.conv{i}"))?;
                    x = f.g.gelu(h);
                }
                x
            }
            BaselineKind::PatchTransformer => {
                let patches = encoder::patchify(image, &self.config)?;
                let p = f.g.leaf(patches, false);
                encoder::forward(f, &self.config, p, true)?
            }
        };
        let pooled = f.g.mean_rows(features)?;
        f.linear(pooled, "head")
    }

    pub fn logit(&self, image: &Tensor) -> Result<f32> {
        let mut g = Graph::new();
        let mut f = Forward::eval(&mut g, &self.params, None);
        let v = self.logit_var(&mut f, image)?;
        Ok(g.value(v).item())
    }
}

pub fn classify_binary(clf: &BaselineClassifier, image: &Tensor) -> Result<BinaryPrediction> {
    Ok(BinaryPrediction::from_logit(clf.logit(image)?))
}

fn target(label: Label) -> f32 {
    match label {
        Label::Real => 0.0,
        Label::Fake => 1.0,
    }
}

impl Learner for BaselineClassifier {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn loss(&self, f: &mut Forward<'_, '_>, input: &Tensor, label: Label) -> Result<(Var, Label)> {
        let logit = self.logit_var(f, input)?;
        let predicted = BinaryPrediction::from_logit(f.g.value(logit).item()).label;
        Ok((f.g.bce_with_logits(logit, target(label))?, predicted))
    }

    fn predict(&self, input: &Tensor) -> Result<Label> {
        Ok(classify_binary(self, input)?.label)
    }
}

/// Binary cross-entropy training on the train split of `manifest`.
pub fn fit_baseline(
    clf: &mut BaselineClassifier,
    manifest: &Manifest,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    let data = load_split(manifest, Split::Train)?;
    if data[0].0.shape()[1] != clf.config.image_size {
        return Err(Error::Config(format!(
            "corpus images are {}px, model expects {}px",
            data[0].0.shape()[1],
            clf.config.image_size
        )));
    }
    train::fit(clf, &data, cfg, on_epoch)
}
