//! Detection as captioning: the two canonical captions, their scoring and
//! the training loop for captioners.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataset::{Manifest, Split};
use crate::error::{Error, Result};
use crate::lora::LoraRuntime;
use crate::model::{CaptionerModel, Forward, ParamStore};
use crate::tensor::Tensor;
use crate::train::{self, load_split, EpochRecord, History, Learner, TrainConfig};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const REAL_TOKEN: usize = 3;
pub const FAKE_TOKEN: usize = 4;
/// Ids from here up to the vocabulary size are unused filler tokens.
pub const FIRST_FILLER_ID: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }

    /// Bit used in agreement codes: 0 real, 1 fake.
    pub fn bit(self) -> char {
        match self {
            Label::Real => '0',
            Label::Fake => '1',
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            _ => Err(Error::Input(format!("unknown label `{s}`"))),
        }
    }
}

/// Token strings by id; filler ids render as `<unused{id}>`.
pub fn vocabulary(vocab_size: usize) -> Vec<String> {
    (0..vocab_size)
        .map(|id| match id {
            PAD => "[PAD]".to_string(),
            BOS => "[BOS]".to_string(),
            EOS => "[EOS]".to_string(),
            REAL_TOKEN => "real".to_string(),
            FAKE_TOKEN => "fake".to_string(),
            _ => format!("<unused{id}>"),
        })
        .collect()
}

/// Fixed-length caption `[BOS, label, EOS, PAD]`.
pub type Caption = [usize; 4];

pub fn caption_of(label: Label) -> Caption {
    let word = match label {
        Label::Real => REAL_TOKEN,
        Label::Fake => FAKE_TOKEN,
    };
    [BOS, word, EOS, PAD]
}

/// Inverse of [`caption_of`]; `None` for any other token sequence.
pub fn label_of(tokens: &[usize]) -> Option<Label> {
    let body: Vec<usize> = tokens.iter().copied().take_while(|&t| t != PAD).collect();
    match body.as_slice() {
        [BOS, REAL_TOKEN, EOS] => Some(Label::Real),
        [BOS, FAKE_TOKEN, EOS] => Some(Label::Fake),
        _ => None,
    }
}

/// Teacher-forcing split: decoder input and next-token targets.
pub fn teacher_forcing(caption: &Caption) -> (&[usize], &[usize]) {
    (&caption[..3], &caption[1..])
}

/// Mean next-token cross-entropy of teacher-forced `logits`, PAD ignored.
pub fn caption_loss(g: &mut Graph<'_>, logits: Var, target: &Caption) -> Result<Var> {
    g.cross_entropy(logits, teacher_forcing(target).1, PAD)
}

/// Summed log-probability of the non-PAD targets of `caption`.
fn log_likelihood(logits: &Tensor, caption: &Caption) -> Result<f64> {
    let (t, v) = logits.dims2()?;
    let targets = teacher_forcing(caption).1;
    if t != targets.len() {
        return Err(Error::shape("log_likelihood", &[t, v], &[targets.len()]));
    }
    let mut ll = 0.0f64;
    for (r, &y) in targets.iter().enumerate() {
        if y == PAD {
            continue;
        }
        let row = &logits.data()[r * v..(r + 1) * v];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let z: f64 = row.iter().map(|&x| f64::from(x - max).exp()).sum();
        ll += f64::from(row[y] - max) - z.ln();
    }
    Ok(ll)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub ll_real: f64,
    pub ll_fake: f64,
}

impl Scores {
    /// Larger likelihood wins; near-ties go to Fake.
    pub fn label(&self) -> Label {
        if self.ll_real - self.ll_fake >= 1e-9 {
            Label::Real
        } else {
            Label::Fake
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub label: Label,
    pub scores: Scores,
}

fn score_context(model: &CaptionerModel, ctx: &Tensor) -> Result<Scores> {
    let mut ll = [0.0; 2];
    for (slot, label) in ll.iter_mut().zip([Label::Real, Label::Fake]) {
        let caption = caption_of(label);
        let logits = model.decode_logits(ctx, teacher_forcing(&caption).0)?;
        *slot = log_likelihood(&logits, &caption)?;
    }
    Ok(Scores {
        ll_real: ll[0],
        ll_fake: ll[1],
    })
}

/// Scores both canonical captions and returns the more likely label.
pub fn classify(model: &CaptionerModel, image: &Tensor) -> Result<Classification> {
    let scores = score_context(model, &model.context(image)?)?;
    Ok(Classification {
        label: scores.label(),
        scores,
    })
}

/// Free-running greedy decoding from BOS, stopping after EOS or at the
/// maximum caption length. Diagnostic only; may return a non-label caption.
pub fn greedy_caption(model: &CaptionerModel, image: &Tensor) -> Result<Vec<usize>> {
    let ctx = model.context(image)?;
    let mut tokens = vec![BOS];
    while tokens.len() < model.config().max_caption_len {
        let logits = model.decode_logits(&ctx, &tokens)?;
        let (t, v) = logits.dims2()?;
        let last = &logits.data()[(t - 1) * v..t * v];
        let next = (0..v).fold(0, |best, i| if last[i] > last[best] { i } else { best });
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(tokens)
}

impl Learner for CaptionerModel {
    fn params(&self) -> &ParamStore {
        CaptionerModel::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        CaptionerModel::params_mut(self)
    }

    fn lora_runtime(&self) -> Option<LoraRuntime> {
        CaptionerModel::lora_runtime(self)
    }

    /// Images become encoder tokens when nothing in the encoder trains.
    fn prepare(&self, image: &Tensor) -> Result<Tensor> {
        if self.encoder_trainable() {
            Ok(image.clone())
        } else {
            self.encode_image(image)
        }
    }

    fn loss(&self, f: &mut Forward<'_, '_>, input: &Tensor, label: Label) -> Result<(Var, Label)> {
        let enc = if input.rank() == 2 {
            f.g.leaf(input.clone(), false)
        } else {
            self.encode_var(f, input)?
        };
        let ctx = self.bridge_var(f, enc)?;
        let mut ll = [0.0; 2];
        let mut loss = None;
        for (slot, candidate) in ll.iter_mut().zip([Label::Real, Label::Fake]) {
            let caption = caption_of(candidate);
            let logits = self.decode_var(f, ctx, teacher_forcing(&caption).0)?;
            *slot = log_likelihood(f.g.value(logits), &caption)?;
            if candidate == label {
                loss = Some(caption_loss(f.g, logits, &caption)?);
            }
        }
        let scores = Scores {
            ll_real: ll[0],
            ll_fake: ll[1],
        };
        Ok((loss.expect("label is one of the two candidates"), scores.label()))
    }

    fn predict(&self, input: &Tensor) -> Result<Label> {
        let ctx = if input.rank() == 2 {
            self.bridge(input)?
        } else {
            self.context(input)?
        };
        Ok(score_context(self, &ctx)?.label())
    }
}

/// Loads the train split of `manifest` and fits `model` on it.
pub fn fit(
    model: &mut CaptionerModel,
    manifest: &Manifest,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    let data = load_split(manifest, Split::Train)?;
    if data[0].0.shape()[1] != model.config().image_size {
        return Err(Error::Config(format!(
            "corpus images are {}px, model expects {}px",
            data[0].0.shape()[1],
            model.config().image_size
        )));
    }
    train::fit(model, &data, cfg, on_epoch)
}
