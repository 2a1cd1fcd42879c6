//! JSON-lines manifest of labeled images.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::generators::GeneratorTag;
use super::{CorpusConfig, CORPUS_FILE};
use crate::caption::Label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Input(format!("unknown split `{s}`"))),
        }
    }
}

/// One manifest line. `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledImage {
    pub path: PathBuf,
    pub label: Label,
    pub generator: GeneratorTag,
    pub split: Split,
}

impl LabeledImage {
    fn check(&self) -> std::result::Result<(), String> {
        let fake = self.generator.is_fake();
        if fake != (self.label == Label::Fake) {
            return Err(format!(
                "generator {} must be labeled {}, found {}",
                self.generator,
                if fake { Label::Fake } else { Label::Real },
                self.label
            ));
        }
        if self.split == Split::Train && !matches!(self.generator, GeneratorTag::Real | GeneratorTag::GTrain) {
            return Err(format!("held-out generator {} in the train split", self.generator));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    root: PathBuf,
    records: Vec<LabeledImage>,
    corpus: Option<CorpusConfig>,
}

impl Manifest {
    /// Validates the records and the train-split balance.
    pub fn new(root: PathBuf, records: Vec<LabeledImage>, corpus: Option<CorpusConfig>) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Manifest {
            path: root.clone(),
            line,
            reason,
        };
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            r.check().map_err(|reason| err(i + 1, reason))?;
            if !seen.insert(&r.path) {
                return Err(err(i + 1, format!("duplicate path {}", r.path.display())));
            }
        }
        let count = |g| {
            records
                .iter()
                .filter(|r| r.split == Split::Train && r.generator == g)
                .count()
        };
        let (real, fake) = (count(GeneratorTag::Real), count(GeneratorTag::GTrain));
        if real != fake {
            return Err(err(
                0,
                format!("train split is unbalanced: {real} REAL vs {fake} G-TRAIN"),
            ));
        }
        Ok(Self { root, records, corpus })
    }

    /// Loads a JSONL manifest; a `corpus.json` beside it, when present,
    /// supplies the corpus configuration.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, reason: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: LabeledImage = serde_json::from_str(line).map_err(|e| err(i + 1, e.to_string()))?;
            r.check().map_err(|reason| err(i + 1, reason))?;
            records.push(r);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let corpus_path = root.join(CORPUS_FILE);
        let corpus = if corpus_path.exists() {
            let text = fs::read_to_string(&corpus_path).map_err(|e| Error::io(&corpus_path, e))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let cfg = v
                .get("config")
                .cloned()
                .ok_or_else(|| err(0, format!("{} has no `config` entry", corpus_path.display())))?;
            Some(serde_json::from_value(cfg)?)
        } else {
            None
        };
        Self::new(root, records, corpus).map_err(|e| match e {
            Error::Manifest { line, reason, .. } => err(line, reason),
            other => other,
        })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[LabeledImage] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn corpus(&self) -> Option<&CorpusConfig> {
        self.corpus.as_ref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.corpus.as_ref().map(|c| c.seed)
    }

    /// Records of one split and generator, in manifest order.
    pub fn filter(&self, split: Split, generator: GeneratorTag) -> Vec<LabeledImage> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.generator == generator)
            .cloned()
            .collect()
    }

    pub fn split(&self, split: Split) -> Vec<LabeledImage> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }

    /// A test subset: the generator's fakes followed by the shared real pool.
    pub fn test_subset(&self, generator: GeneratorTag) -> Vec<LabeledImage> {
        let mut out = self.filter(Split::Test, generator);
        out.extend(self.filter(Split::Test, GeneratorTag::Real));
        out
    }

    /// `split -> generator -> count`.
    pub fn counts(&self) -> BTreeMap<String, BTreeMap<String, usize>> {
        let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.split.to_string())
                .or_default()
                .entry(r.generator.to_string())
                .or_default() += 1;
        }
        out
    }

    pub fn resolve(&self, record: &LabeledImage) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn image_size(&self) -> usize {
        self.corpus.as_ref().map_or(32, |c| c.image_size)
    }

    pub fn read(&self, record: &LabeledImage) -> Result<Tensor> {
        super::ppm::read_image(&self.resolve(record), self.image_size())
    }
}
