//! Command implementations behind the `capdet` binary.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use capdet_core::checkpoint::{build_model, load_checkpoint, save_checkpoint, ModelKind, TrainedModel};
use capdet_core::dataset::{generate_corpus, verify_corpus, CorpusConfig, Manifest};
use capdet_core::metrics::{
    agreement_codes, agreement_csv, matrix_from_predictions, predict_test_split, AgreementCode, Detector, EvalMatrix,
};
use capdet_core::train::History;
use capdet_core::Error;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::RunConfig;

pub const CHECKPOINT_FILE: &str = "model.tensors";
pub const ADAPTER_FILE: &str = "adapter.tensors";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const DIGEST_FILE: &str = "frozen_digest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const MATRIX_JSON: &str = "matrix.json";
pub const MATRIX_TXT: &str = "matrix.txt";
pub const AGREEMENT_CSV: &str = "agreement.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("frozen parameters changed during training (digest {before} before, {after} after)")]
    FrozenChanged { before: String, after: String },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::FrozenChanged { .. } => 3,
            Self::Core(e) => match e {
                Error::Config(_) | Error::Input(_) | Error::UnknownParam(_) | Error::ConfigHash { .. } => 1,
                Error::NonFiniteLoss { .. } | Error::NonDeterministic { .. } | Error::EmptyLoss => 3,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

// Progress output is best effort; a closed stdout must not abort a run.
macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        let _ = writeln!($out, $($arg)*);
    };
}

fn counts_table(manifest: &Manifest) -> String {
    let mut s = String::from("split  generator  count\n");
    for (split, gens) in manifest.counts() {
        for (g, n) in gens {
            s.push_str(&format!("{split:<5}  {g:<9}  {n}\n"));
        }
    }
    s
}

/// Writes the corpus, or with `check` verifies that an existing corpus is
/// byte-identical to what the configuration would generate.
pub fn cmd_gen_data(cfg: &RunConfig, check: bool, out: &mut dyn Write) -> CliResult<()> {
    let corpus = cfg.corpus();
    if check {
        let mismatched = verify_corpus(&cfg.corpus_dir, &corpus)?;
        if !mismatched.is_empty() {
            let shown: Vec<String> = mismatched.iter().take(5).map(|p| p.display().to_string()).collect();
            return Err(CliError::Data(format!(
                "{} files differ from a fresh generation, e.g. {}",
                mismatched.len(),
                shown.join(", ")
            )));
        }
        say!(
            out,
            "corpus at {} matches seed {}",
            cfg.corpus_dir.display(),
            corpus.seed
        );
        return Ok(());
    }
    let manifest = generate_corpus(&cfg.corpus_dir, &corpus)?;
    say!(out, "wrote {} images to {}", manifest.len(), cfg.corpus_dir.display());
    let _ = write!(out, "{}", counts_table(&manifest));
    Ok(())
}

fn load_manifest(cfg: &RunConfig) -> CliResult<Manifest> {
    let path = cfg.manifest_path();
    if !path.exists() {
        return Err(CliError::Data(format!(
            "no corpus at {} (run gen-data first)",
            path.display()
        )));
    }
    Ok(Manifest::load(&path)?)
}

fn check_corpus_matches(cfg: &RunConfig, manifest: &Manifest) -> CliResult<()> {
    match manifest.corpus() {
        Some(c) if *c != cfg.corpus() => Err(CliError::Data(format!(
            "corpus at {} was generated with {c:?}, configuration asks for {:?}",
            cfg.corpus_dir.display(),
            cfg.corpus()
        ))),
        _ => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenDigest {
    pub before: String,
    pub after: String,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub version: String,
    pub model: ModelKind,
    pub corpus: CorpusConfig,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub trainable: usize,
    pub total: usize,
    pub history: History,
    pub digest: FrozenDigest,
}

/// Trains the configured model and writes its run directory.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<TrainSummary> {
    let manifest = load_manifest(cfg)?;
    check_corpus_matches(cfg, &manifest)?;
    let mut model = build_model(cfg.model, &cfg.model_config(), &cfg.lora(), cfg.seed)?;

    let params = model.params();
    let (trainable, total) = (params.numel_trainable(), params.numel());
    say!(
        out,
        "{}: trainable parameters {trainable} of {total} ({:.2}%)",
        cfg.model,
        100.0 * trainable as f64 / total as f64
    );
    if let TrainedModel::Adapted(a) = &model {
        let lora_cfg = a.lora_cfg();
        say!(
            out,
            "lora: {} adapted projections x 2 x rank {} x d_model {} = {}",
            a.adapter_names().len(),
            lora_cfg.rank,
            cfg.d_model,
            a.adapter_names().len() * 2 * lora_cfg.rank * cfg.d_model
        );
    }

    let before = model.params().frozen_digest();
    let history = model.fit(&manifest, &cfg.train(), |e| {
        say!(
            out,
            "epoch {:>3}  loss {:.5}  train_acc {:.4}  {:.1}s",
            e.epoch,
            e.mean_loss,
            e.train_acc,
            e.seconds
        );
    })?;
    let after = model.params().frozen_digest();
    if before != after {
        return Err(CliError::FrozenChanged { before, after });
    }
    let digest = FrozenDigest {
        before,
        after,
        status: "pass".into(),
    };

    let dir = &cfg.run_dir;
    create_dir(dir)?;
    save_checkpoint(&model, &dir.join(CHECKPOINT_FILE))?;
    if let TrainedModel::Adapted(a) = &model {
        a.save_adapter(&dir.join(ADAPTER_FILE))?;
    }
    history.write(&dir.join(HISTORY_FILE))?;
    write_file(
        &dir.join(DIGEST_FILE),
        serde_json::to_vec_pretty(&digest).map_err(Error::from)?,
    )?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml())?;
    let info = RunInfo {
        version: env!("CARGO_PKG_VERSION").into(),
        model: cfg.model,
        corpus: cfg.corpus(),
    };
    write_file(
        &dir.join(RUN_FILE),
        serde_json::to_vec_pretty(&info).map_err(Error::from)?,
    )?;
    say!(out, "frozen digest: {}", digest.status);
    say!(out, "run written to {}", dir.display());
    Ok(TrainSummary {
        run_dir: dir.clone(),
        trainable,
        total,
        history,
        digest,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub matrix: EvalMatrix,
    pub codes: Vec<AgreementCode>,
    /// Row names, which are also the bit order of the agreement codes.
    pub models: Vec<String>,
}

/// Evaluates checkpoints on every test subset. Models are ordered conv,
/// patch, xattn, qb, lora-qb (checkpoints of the same kind keep their
/// command-line order); the agreement-code bits follow the same order.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    out_dir: &Path,
    out: &mut dyn Write,
) -> CliResult<EvalOutput> {
    if checkpoints.is_empty() {
        return Err(CliError::Usage("eval needs at least one checkpoint".into()));
    }
    let manifest = load_manifest(cfg)?;
    let mut models = Vec::new();
    for path in checkpoints {
        if !path.exists() {
            return Err(CliError::Data(format!("checkpoint not found: {}", path.display())));
        }
        let m = load_checkpoint(path)?;
        if m.config().image_size != manifest.image_size() {
            return Err(CliError::Usage(format!(
                "{} expects {}px images, corpus has {}px",
                path.display(),
                m.config().image_size,
                manifest.image_size()
            )));
        }
        models.push(m);
    }
    models.sort_by_key(|m| m.kind().order());
    let mut names: Vec<String> = Vec::new();
    for m in &models {
        let base = m.kind().to_string();
        let dup = names.iter().filter(|n| n.split('#').next() == Some(&base)).count();
        names.push(if dup == 0 { base } else { format!("{base}#{}", dup + 1) });
    }
    let named: Vec<(String, &dyn Detector)> = names
        .iter()
        .cloned()
        .zip(models.iter().map(|m| m as &dyn Detector))
        .collect();
    let preds = predict_test_split(&named, &manifest)?;
    let matrix = matrix_from_predictions(&preds, &manifest)?;
    let codes = agreement_codes(&preds)?;

    create_dir(out_dir)?;
    let table = matrix.to_table(&matrix.best_cells());
    write_file(
        &out_dir.join(MATRIX_JSON),
        serde_json::to_string_pretty(&matrix).map_err(Error::from)?,
    )?;
    write_file(&out_dir.join(MATRIX_TXT), &table)?;
    write_file(&out_dir.join(AGREEMENT_CSV), agreement_csv(&codes))?;
    let _ = write!(out, "{table}");
    say!(out, "agreement code bit order: {}", names.join(", "));
    Ok(EvalOutput {
        matrix,
        codes,
        models: names,
    })
}

fn read_matrix(dir: &Path) -> CliResult<EvalMatrix> {
    let path = dir.join(MATRIX_JSON);
    let raw = fs::read(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_slice(&raw).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Merges the evaluation matrices of several run directories into one
/// table sorted by average accuracy, best cell per column marked with `*`.
pub fn cmd_report(dirs: &[PathBuf], out: &mut dyn Write) -> CliResult<(EvalMatrix, String)> {
    let Some(first_dir) = dirs.first() else {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    };
    let mut merged = read_matrix(first_dir)?;
    for dir in &dirs[1..] {
        let m = read_matrix(dir)?;
        if m.corpus_seed != merged.corpus_seed {
            return Err(CliError::Data(format!(
                "{} was evaluated on corpus seed {:?} but {} on {:?}; results are not comparable",
                dir.display(),
                m.corpus_seed,
                first_dir.display(),
                merged.corpus_seed
            )));
        }
        if m.columns != merged.columns {
            return Err(CliError::Data(format!("{} has different test subsets", dir.display())));
        }
        merged.rows.extend(m.rows);
    }
    merged.rows.sort_by(|a, b| b.avg.acc.total_cmp(&a.avg.acc));
    let table = merged.to_table(&merged.best_cells());
    let _ = write!(out, "{table}");
    Ok((merged, table))
}

#[derive(Clone, Debug)]
pub struct ProtocolOutput {
    pub eval: EvalOutput,
    pub runs: Vec<TrainSummary>,
}

/// gen-data, train every model kind with `base`'s settings, then eval.
/// Everything is written under `root`.
pub fn run_protocol(base: &RunConfig, root: &Path, out: &mut dyn Write) -> CliResult<ProtocolOutput> {
    let mut cfg = base.clone();
    cfg.corpus_dir = root.join("data");
    cmd_gen_data(&cfg, false, out)?;
    let mut runs = Vec::new();
    for kind in ModelKind::ALL {
        let run = RunConfig {
            model: kind,
            run_dir: root.join("runs").join(kind.as_str()),
            ..cfg.clone()
        };
        run.validate()?;
        runs.push(cmd_train(&run, out)?);
    }
    let checkpoints: Vec<PathBuf> = runs.iter().map(|r| r.run_dir.join(CHECKPOINT_FILE)).collect();
    let eval = cmd_eval(&cfg, &checkpoints, &root.join("eval"), out)?;
    Ok(ProtocolOutput { eval, runs })
}
