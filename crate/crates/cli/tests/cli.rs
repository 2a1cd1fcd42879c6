use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use capdet::{FrozenDigest, CHECKPOINT_FILE, DIGEST_FILE, MATRIX_JSON, MATRIX_TXT};
use capdet_core::checkpoint::{build_model, load_checkpoint};
use capdet_core::dataset::Manifest;
use capdet_core::metrics::EvalMatrix;

fn capdet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capdet"))
        .current_dir(dir)
        .env_remove("CAPDET_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
seed = 7
n_train = 8
n_test = 2
encoder_layers = 1
decoder_layers = 1
bridge_layers = 1
learning_rate = 0.001
epochs = 1
batch_size = 4
"#;

fn workspace(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), format!("{SMALL}{extra}")).unwrap();
    let o = capdet(dir.path(), &["gen-data", "-c", "run.toml"]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

fn train(dir: &Path, model: &str, run_dir: &str, extra: &[&str]) -> Output {
    let model = format!("model={model}");
    let run = format!("run_dir={run_dir}");
    let mut args = vec!["train", "-c", "run.toml", "--set", &model, "--set", &run];
    for e in extra {
        args.extend(["--set", e]);
    }
    capdet(dir, &args)
}

#[test]
fn gen_data_then_check() {
    let dir = workspace("");
    let o = capdet(dir.path(), &["gen-data", "-c", "run.toml", "--check"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let victim = dir.path().join("data/test/g-a/00000.ppm");
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&victim, bytes).unwrap();
    let o = capdet(dir.path(), &["gen-data", "-c", "run.toml", "--check"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("00000.ppm"), "{}", stderr(&o));
}

#[test]
fn gen_data_counts_table() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    let o = capdet(dir.path(), &["gen-data", "-c", "run.toml"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("wrote 32 images"), "{text}");
    assert!(text.contains("G-TRAIN"));
}

#[test]
fn unwritable_output_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    fs::write(dir.path().join("blocker"), "not a directory").unwrap();
    let o = capdet(
        dir.path(),
        &["gen-data", "-c", "run.toml", "--set", "corpus_dir=blocker/data"],
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("blocker"), "{}", stderr(&o));
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let dir = workspace("");
    let o = train(dir.path(), "qb", "runs/qb", &["epochs=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let saved = load_checkpoint(&dir.path().join("runs/qb").join(CHECKPOINT_FILE)).unwrap();
    let fresh = build_model(saved.kind(), saved.config(), &Default::default(), 7).unwrap();
    assert_eq!(saved, fresh);
}

#[test]
fn lora_run_reports_counts_and_digest() {
    let dir = workspace("");
    let o = train(dir.path(), "lora-qb", "runs/lora", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    // 1 encoder + 1 decoder layer, q and k each: 4 adapters.
    assert!(
        text.contains("lora: 4 adapted projections x 2 x rank 16 x d_model 64 = 8192"),
        "{text}"
    );
    assert!(text.contains("trainable parameters 8192 of "), "{text}");
    assert!(text.contains("epoch   1"));
    let digest: FrozenDigest =
        serde_json::from_slice(&fs::read(dir.path().join("runs/lora").join(DIGEST_FILE)).unwrap()).unwrap();
    assert_eq!(digest.status, "pass");
    assert_eq!(digest.before, digest.after);
    for f in [
        "adapter.tensors",
        "adapter.json",
        "history.jsonl",
        "config.toml",
        "run.json",
        "model.json",
    ] {
        assert!(dir.path().join("runs/lora").join(f).exists(), "{f}");
    }
}

#[test]
fn eval_missing_checkpoint_names_it() {
    let dir = workspace("");
    let o = capdet(dir.path(), &["eval", "-c", "run.toml", "nowhere/model.tensors"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere/model.tensors"));
}

fn read_matrix(dir: &Path) -> EvalMatrix {
    serde_json::from_slice(&fs::read(dir.join(MATRIX_JSON)).unwrap()).unwrap()
}

#[test]
fn eval_and_report_single_model() {
    let dir = workspace("");
    assert!(train(dir.path(), "conv", "runs/conv", &[]).status.success());
    let ckpt = format!("runs/conv/{CHECKPOINT_FILE}");
    let o = capdet(dir.path(), &["eval", "-c", "run.toml", "--out", "eval", &ckpt]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("agreement code bit order: conv"));
    let m = read_matrix(&dir.path().join("eval"));
    assert_eq!(m.rows.len(), 1);
    assert_eq!(m.rows[0].cells.len(), 7);
    let csv = fs::read_to_string(dir.path().join("eval/agreement.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8 * 2);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0") || l.ends_with(",1")));

    let o = capdet(dir.path(), &["report", "eval", "--out", "report.txt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let own = fs::read_to_string(dir.path().join("eval").join(MATRIX_TXT)).unwrap();
    assert_eq!(stdout(&o), own);
    assert_eq!(fs::read_to_string(dir.path().join("report.txt")).unwrap(), own);
}

fn fake_eval(dir: &Path, name: &str, seed: u64, acc: f64) -> PathBuf {
    use capdet_core::dataset::GeneratorTag;
    use capdet_core::metrics::{Cell, MatrixRow};
    let cell = Cell { acc, f1: acc };
    let m = EvalMatrix {
        corpus_seed: Some(seed),
        columns: GeneratorTag::TEST_FAKES.to_vec(),
        rows: vec![MatrixRow {
            model: name.into(),
            cells: vec![cell; 7],
            avg: cell,
        }],
    };
    let d = dir.join(name);
    fs::create_dir_all(&d).unwrap();
    fs::write(d.join(MATRIX_JSON), serde_json::to_vec(&m).unwrap()).unwrap();
    d
}

#[test]
fn report_ranks_and_refuses_mixed_corpora() {
    let dir = tempfile::tempdir().unwrap();
    fake_eval(dir.path(), "weak", 1, 0.6);
    fake_eval(dir.path(), "strong", 1, 0.9);
    fake_eval(dir.path(), "other", 2, 0.7);

    let o = capdet(dir.path(), &["report", "weak", "strong"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[2].starts_with("strong"));
    assert_eq!(lines[2].matches('*').count(), 8);
    assert_eq!(lines[3].matches('*').count(), 0);

    let o = capdet(dir.path(), &["report", "weak", "other"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("corpus seed"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["frobnicate"],
        vec!["train", "--set", "no_such_key=1"],
        vec!["train", "--set", "epochs"],
        vec!["train", "--set", "batch_size=0"],
        vec!["train", "--set", "model=blip"],
        vec!["train", "-c", "missing.toml"],
        vec!["eval"],
    ] {
        let o = capdet(dir.path(), &args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
    assert_eq!(capdet(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn train_without_corpus_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = capdet(dir.path(), &["train", "--set", "corpus_dir=absent"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent"));
}

#[test]
fn seed_from_environment_and_override() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    let run = |env: Option<&str>, extra: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_capdet"));
        c.current_dir(dir.path()).env_remove("CAPDET_SEED");
        if let Some(s) = env {
            c.env("CAPDET_SEED", s);
        }
        c.args(["gen-data", "-c", "run.toml", "--set", "corpus_dir=d"])
            .args(extra);
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        Manifest::load(&dir.path().join("d/manifest.jsonl")).unwrap().seed()
    };
    assert_eq!(run(Some("99"), &[]), Some(99));
    assert_eq!(run(Some("99"), &["--set", "seed=5"]), Some(5));
    assert_eq!(run(None, &[]), Some(7));

    let o = Command::new(env!("CARGO_BIN_EXE_capdet"))
        .current_dir(dir.path())
        .env("CAPDET_SEED", "minus one")
        .args(["gen-data"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
