use capdet_core::autograd::Var;
use capdet_core::caption::Label;
use capdet_core::model::{Forward, ParamStore};
use capdet_core::train::{fit, Learner, TrainConfig};
use capdet_core::{Error, Result, Tensor};

/// Logistic regression on two features, for exercising the training loop.
struct Logistic {
    params: ParamStore,
    poison: bool,
}

impl Logistic {
    fn new(w: [f32; 2]) -> Self {
        let mut params = ParamStore::new();
        params
            .insert("w", Tensor::new(&[1, 2], w.to_vec()).unwrap(), true)
            .unwrap();
        params
            .insert("frozen", Tensor::new(&[1, 2], vec![0.5, -0.5]).unwrap(), false)
            .unwrap();
        Self { params, poison: false }
    }

    fn logit(&self, f: &mut Forward<'_, '_>, x: &Tensor) -> Result<Var> {
        let w = f.param("w")?;
        let frozen = f.param("frozen")?;
        let x = f.g.leaf(x.clone(), false);
        let wx = f.g.mul(w, x)?;
        let fx = f.g.mul(frozen, x)?;
        let z = f.g.add(wx, fx)?;
        Ok(f.g.sum(z))
    }
}

impl Learner for Logistic {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn loss(&self, f: &mut Forward<'_, '_>, input: &Tensor, label: Label) -> Result<(Var, Label)> {
        let mut z = self.logit(f, input)?;
        if self.poison {
            z = f.g.scale(z, f32::NAN);
        }
        let pred = if f.g.value(z).item() >= 0.0 {
            Label::Fake
        } else {
            Label::Real
        };
        let y = if label == Label::Fake { 1.0 } else { 0.0 };
        Ok((f.g.bce_with_logits(z, y)?, pred))
    }

    fn predict(&self, input: &Tensor) -> Result<Label> {
        let d = input.data();
        let w = self.params.get("w")?.data();
        let z = (w[0] + 0.5) * d[0] + (w[1] - 0.5) * d[1];
        Ok(if z >= 0.0 { Label::Fake } else { Label::Real })
    }
}

fn data() -> Vec<(Tensor, Label)> {
    vec![
        (Tensor::new(&[1, 2], vec![1.0, 0.5]).unwrap(), Label::Fake),
        (Tensor::new(&[1, 2], vec![-1.0, 0.25]).unwrap(), Label::Real),
        (Tensor::new(&[1, 2], vec![0.5, -2.0]).unwrap(), Label::Fake),
    ]
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn first_full_batch_step_matches_hand_computed_adam() {
    let w0 = [0.1f32, -0.2];
    let mut m = Logistic::new(w0);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 1,
        batch_size: 3,
        seed: 1,
    };
    let hist = fit(&mut m, &data(), &cfg, |_| {}).unwrap();

    // d/dw mean BCE = mean((σ(z) − y)·x); Adam's first step is lr·g/(|g|+eps).
    let mut g = [0.0f64; 2];
    let mut loss = 0.0;
    for (x, y) in data() {
        let d = x.data();
        let z = (w0[0] as f64 + 0.5) * d[0] as f64 + (w0[1] as f64 - 0.5) * d[1] as f64;
        let y = if y == Label::Fake { 1.0 } else { 0.0 };
        let p = sigmoid(z);
        loss += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()) / 3.0;
        for k in 0..2 {
            g[k] += (p - y) * d[k] as f64 / 3.0;
        }
    }
    let w = m.params.get("w").unwrap().data();
    for k in 0..2 {
        let expect = w0[k] as f64 - 0.01 * g[k] / (g[k].abs() + 1e-8);
        assert!((w[k] as f64 - expect).abs() < 1e-6, "{k}: {} vs {expect}", w[k]);
    }
    assert_eq!(m.params.get("frozen").unwrap().data(), &[0.5, -0.5]);
    assert!((hist.step_losses[0] - loss).abs() < 1e-5);
    assert_eq!(hist.epochs.len(), 1);
}

#[test]
fn step_count_and_history() {
    let mut m = Logistic::new([0.0, 0.0]);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 4,
        batch_size: 2,
        seed: 3,
    };
    let mut seen = Vec::new();
    let hist = fit(&mut m, &data(), &cfg, |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2, 3, 4]);
    assert_eq!(hist.step_losses.len(), 4 * 2);
    let lines = hist.to_jsonl().unwrap();
    assert_eq!(lines.lines().count(), 4);
    assert!(lines.lines().next().unwrap().contains("\"mean_loss\""));
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let mut m = Logistic::new([0.3, 0.7]);
    let before = m.params.clone();
    let hist = fit(
        &mut m,
        &data(),
        &TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        |_| {},
    )
    .unwrap();
    assert!(hist.epochs.is_empty());
    assert_eq!(m.params, before);
}

#[test]
fn non_finite_loss_is_an_error() {
    let mut m = Logistic::new([0.3, 0.7]);
    m.poison = true;
    let err = fit(&mut m, &data(), &TrainConfig::default(), |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, step: 0 }), "{err:?}");
}

#[test]
fn bad_configs_and_empty_data_are_rejected() {
    let mut m = Logistic::new([0.0, 0.0]);
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: f32::NAN,
            ..TrainConfig::default()
        },
    ] {
        assert!(fit(&mut m, &data(), &cfg, |_| {}).is_err());
    }
    assert!(matches!(
        fit(&mut m, &[], &TrainConfig::default(), |_| {}),
        Err(Error::EmptyData(_))
    ));
}
