//! Accuracy / F1 with Fake as the positive class, the cross-generator
//! evaluation matrix and per-image agreement codes.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{classify_binary, BaselineClassifier};
use crate::caption::{classify, Label};
use crate::dataset::{GeneratorTag, LabeledImage, Manifest, Split};
use crate::error::{Error, Result};
use crate::model::CaptionerModel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, pred: Label, gold: Label) {
        match (pred, gold) {
            (Label::Fake, Label::Fake) => self.tp += 1,
            (Label::Fake, Label::Real) => self.fp += 1,
            (Label::Real, Label::Real) => self.tn += 1,
            (Label::Real, Label::Fake) => self.fn_ += 1,
        }
    }

    fn check(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::EmptyData("empty confusion matrix".into()));
        }
        Ok(())
    }

    /// Precision; 0 when nothing was predicted Fake.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Recall; 0 when there are no Fake golds.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion(preds: &[Label], golds: &[Label]) -> Result<Confusion> {
    if preds.len() != golds.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} gold labels",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyData("no predictions".into()));
    }
    let mut c = Confusion::default();
    for (&p, &g) in preds.iter().zip(golds) {
        c.add(p, g);
    }
    Ok(c)
}

pub fn accuracy(c: &Confusion) -> Result<f64> {
    c.check()?;
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(c: &Confusion) -> Result<f64> {
    c.check()?;
    let (p, r) = (c.precision(), c.recall());
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Anything that labels an image real or fake.
pub trait Detector: Sync {
    fn detect(&self, image: &Tensor) -> Result<Label>;
}

impl Detector for CaptionerModel {
    fn detect(&self, image: &Tensor) -> Result<Label> {
        Ok(classify(self, image)?.label)
    }
}

impl Detector for BaselineClassifier {
    fn detect(&self, image: &Tensor) -> Result<Label> {
        Ok(classify_binary(self, image)?.label)
    }
}

/// Always answers the same label.
#[derive(Clone, Copy, Debug)]
pub struct Constant(pub Label);

impl Detector for Constant {
    fn detect(&self, _: &Tensor) -> Result<Label> {
        Ok(self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub acc: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub model: String,
    pub cells: Vec<Cell>,
    pub avg: Cell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub corpus_seed: Option<u64>,
    pub columns: Vec<GeneratorTag>,
    pub rows: Vec<MatrixRow>,
}

fn mean_cell(cells: &[Cell]) -> Cell {
    let n = cells.len().max(1) as f64;
    Cell {
        acc: cells.iter().map(|c| c.acc).sum::<f64>() / n,
        f1: cells.iter().map(|c| c.f1).sum::<f64>() / n,
    }
}

/// Per-model predictions over the whole test split, in manifest order.
pub struct Predictions {
    pub model: String,
    pub records: Vec<LabeledImage>,
    pub labels: Vec<Label>,
}

impl Predictions {
    fn get(&self, record: &LabeledImage) -> Option<Label> {
        self.records.iter().position(|r| r == record).map(|i| self.labels[i])
    }
}

/// Reads the test split once and runs every detector over it.
pub fn predict_test_split(models: &[(String, &dyn Detector)], manifest: &Manifest) -> Result<Vec<Predictions>> {
    if models.is_empty() {
        return Err(Error::Input("no models to evaluate".into()));
    }
    let records = manifest.split(Split::Test);
    if records.is_empty() {
        return Err(Error::EmptyData("manifest has no test records".into()));
    }
    let images: Vec<Tensor> = records.par_iter().map(|r| manifest.read(r)).collect::<Result<_>>()?;
    models
        .iter()
        .map(|(name, det)| {
            let labels = images.par_iter().map(|x| det.detect(x)).collect::<Result<_>>()?;
            Ok(Predictions {
                model: name.clone(),
                records: records.clone(),
                labels,
            })
        })
        .collect()
}

/// Fills one row per model: each column scores that generator's fakes
/// together with the shared real pool, whose predictions are computed once.
pub fn matrix_from_predictions(preds: &[Predictions], manifest: &Manifest) -> Result<EvalMatrix> {
    let reals = manifest.filter(Split::Test, GeneratorTag::Real);
    if reals.is_empty() {
        return Err(Error::EmptyData("test split has no REAL pool".into()));
    }
    let mut rows = Vec::new();
    for p in preds {
        let lookup = |r: &LabeledImage| {
            p.get(r)
                .ok_or_else(|| Error::Input(format!("no prediction for {}", r.path.display())))
        };
        let mut real_conf = Confusion::default();
        for r in &reals {
            real_conf.add(lookup(r)?, r.label);
        }
        let mut cells = Vec::new();
        for g in GeneratorTag::TEST_FAKES {
            let fakes = manifest.filter(Split::Test, g);
            if fakes.is_empty() {
                return Err(Error::EmptyData(format!("test subset {g} is empty")));
            }
            let mut c = real_conf;
            for r in &fakes {
                c.add(lookup(r)?, r.label);
            }
            cells.push(Cell {
                acc: accuracy(&c)?,
                f1: f1(&c)?,
            });
        }
        rows.push(MatrixRow {
            model: p.model.clone(),
            avg: mean_cell(&cells),
            cells,
        });
    }
    Ok(EvalMatrix {
        corpus_seed: manifest.seed(),
        columns: GeneratorTag::TEST_FAKES.to_vec(),
        rows,
    })
}

pub fn evaluate_matrix(models: &[(String, &dyn Detector)], manifest: &Manifest) -> Result<EvalMatrix> {
    matrix_from_predictions(&predict_test_split(models, manifest)?, manifest)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementCode {
    pub path: String,
    /// One character per model in evaluation order: `0` real, `1` fake.
    pub code: String,
}

/// Agreement codes for every test image, bits in the order of `preds`.
pub fn agreement_codes(preds: &[Predictions]) -> Result<Vec<AgreementCode>> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Input("no models for agreement codes".into()))?;
    if preds.iter().any(|p| p.records != first.records) {
        return Err(Error::Input("models were evaluated on different image lists".into()));
    }
    Ok(first
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| AgreementCode {
            path: r.path.display().to_string(),
            code: preds.iter().map(|p| p.labels[i].bit()).collect(),
        })
        .collect())
}

pub fn agreement_csv(codes: &[AgreementCode]) -> String {
    let mut out = String::from("path,code\n");
    for c in codes {
        let _ = writeln!(out, "{},{}", c.path, c.code);
    }
    out
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

impl EvalMatrix {
    /// Aligned text table with `ACC / F1` percentages per cell. Cells in
    /// `best` (row, column) are marked with `*`.
    pub fn to_table(&self, best: &[(usize, usize)]) -> String {
        let mut header = vec!["Model".to_string()];
        header.extend(self.columns.iter().map(|c| c.to_string()));
        header.push("Avg".into());
        let mut lines = vec![header];
        for (ri, row) in self.rows.iter().enumerate() {
            let mut line = vec![row.model.clone()];
            for (ci, c) in row.cells.iter().chain(std::iter::once(&row.avg)).enumerate() {
                let mark = if best.contains(&(ri, ci)) { "*" } else { "" };
                line.push(format!("{} / {}{mark}", pct(c.acc), pct(c.f1)));
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::from("ACC (%) / F1 (%)\n");
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, w))| if i == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    /// Highest-accuracy row per column (Avg included); ties mark every
    /// tied row.
    pub fn best_cells(&self) -> Vec<(usize, usize)> {
        let n_cols = self.columns.len() + 1;
        let mut out = Vec::new();
        for ci in 0..n_cols {
            let acc = |r: &MatrixRow| if ci < r.cells.len() { r.cells[ci].acc } else { r.avg.acc };
            let best = self.rows.iter().map(acc).fold(f64::NEG_INFINITY, f64::max);
            out.extend(
                self.rows
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| acc(r) == best)
                    .map(|(ri, _)| (ri, ci)),
            );
        }
        out
    }
}
