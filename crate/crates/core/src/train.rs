//! Minibatch training shared by captioners and baselines.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::caption::Label;
use crate::dataset::{Manifest, Split};
use crate::error::{Error, Result};
use crate::lora::LoraRuntime;
use crate::model::{Forward, ParamStore};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            epochs: 20,
            batch_size: 32,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Mean minibatch loss of every optimizer step.
    pub step_losses: Vec<f64>,
}

impl History {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

/// A model the training loop can fit.
pub trait Learner: Sync {
    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    fn lora_runtime(&self) -> Option<LoraRuntime> {
        None
    }

    /// Converts an image into the per-example input fed to [`Learner::loss`],
    /// e.g. cached features of a frozen stage. Must not depend on trainable
    /// parameters.
    fn prepare(&self, image: &Tensor) -> Result<Tensor> {
        Ok(image.clone())
    }

    /// Scalar loss of one prepared example, plus the label the same
    /// forward pass predicts (used for the running train accuracy).
    fn loss(&self, f: &mut Forward<'_, '_>, input: &Tensor, label: Label) -> Result<(Var, Label)>;

    fn predict(&self, input: &Tensor) -> Result<Label>;
}

/// Reads every record of `split` as `(image, label)`.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<(Tensor, Label)>> {
    let records = manifest.split(split);
    if records.is_empty() {
        return Err(Error::EmptyData(format!("manifest has no {split} records")));
    }
    records.par_iter().map(|r| Ok((manifest.read(r)?, r.label))).collect()
}

struct Example {
    loss: f64,
    correct: bool,
    grads: Vec<Option<Tensor>>,
}

fn example_grads<L: Learner>(
    learner: &L,
    input: &Tensor,
    label: Label,
    trainable: &[usize],
    rng: Rng,
) -> Result<Example> {
    let mut g = Graph::new();
    let mut f = Forward::train(&mut g, learner.params(), learner.lora_runtime(), rng);
    let (loss, predicted) = learner.loss(&mut f, input, label)?;
    let vars: Vec<Option<Var>> = trainable.iter().map(|&i| f.binding(i)).collect();
    drop(f);
    g.backward(loss)?;
    let value = f64::from(g.value(loss).item());
    let grads = vars.into_iter().map(|v| v.and_then(|v| g.take_grad(v))).collect();
    Ok(Example {
        loss: value,
        correct: predicted == label,
        grads,
    })
}

/// Fraction of `inputs` the learner labels correctly.
pub fn accuracy_on<L: Learner>(learner: &L, inputs: &[(Tensor, Label)]) -> Result<f64> {
    let correct: Vec<bool> = inputs
        .par_iter()
        .map(|(x, y)| Ok(learner.predict(x)? == *y))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / inputs.len().max(1) as f64)
}

/// Runs `epochs × ⌈n / batch_size⌉` Adam steps over the trainable
/// parameters. Train accuracy is the running accuracy of the training
/// forward passes within each epoch. Example order is reshuffled each epoch from the seed;
/// per-example gradients are summed in a fixed order so results do not
/// depend on thread scheduling.
pub fn fit<L: Learner>(
    learner: &mut L,
    data: &[(Tensor, Label)],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData("no training examples".into()));
    }
    let inputs: Vec<(Tensor, Label)> = data
        .par_iter()
        .map(|(x, y)| Ok((learner.prepare(x)?, *y)))
        .collect::<Result<_>>()?;
    let trainable = learner.params().trainable_indices();
    let adam = cfg.adam();
    let mut state = AdamState::new(
        learner
            .params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| &p.value),
    );
    let shapes: Vec<Vec<usize>> = learner
        .params()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.value.shape().to_vec())
        .collect();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..inputs.len()).collect();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        Rng::stream(cfg.seed, &format!("shuffle/epoch{epoch}")).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let learner_ref = &*learner;
            let examples: Vec<Example> = batch
                .par_iter()
                .enumerate()
                .map(|(i, &idx)| {
                    let rng = Rng::stream(cfg.seed, &format!("dropout/{epoch}/{step}/{i}"));
                    let (x, y) = &inputs[idx];
                    example_grads(learner_ref, x, *y, &trainable, rng)
                })
                .collect::<Result<_>>()?;
            let n = examples.len() as f32;
            let mut sum: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            let mut batch_loss = 0.0;
            for ex in &examples {
                batch_loss += ex.loss;
                correct += usize::from(ex.correct);
                for (acc, g) in sum.iter_mut().zip(&ex.grads) {
                    if let Some(g) = g {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                }
            }
            let batch_loss = batch_loss / examples.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            for t in &mut sum {
                for v in t.data_mut() {
                    *v /= n;
                }
            }
            let mut params = learner.params_mut().trainable_values_mut();
            adam_step(&mut params, &sum, &mut state, &adam)?;
            history.step_losses.push(batch_loss);
            epoch_loss += batch_loss * examples.len() as f64;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: epoch_loss / inputs.len() as f64,
            train_acc: correct as f64 / inputs.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}
