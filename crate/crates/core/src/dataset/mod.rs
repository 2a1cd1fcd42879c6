//! Procedural multi-generator benchmark: one real distribution, one fake
//! generator for training, six held-out fake generators for testing.

pub mod generators;
pub mod manifest;
pub mod ppm;
pub mod stats;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caption::Label;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use generators::{designed_statistic, render, GeneratorTag};
pub use manifest::{LabeledImage, Manifest, Split};
pub use ppm::read_image;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CORPUS_FILE: &str = "corpus.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Images per class in the train split.
    pub n_train: usize,
    /// Fake images per test subset, and the size of the shared real pool.
    pub n_test: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_test: 250,
            image_size: 32,
            seed: 42,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("corpus counts must be at least 1".into()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(generators::BLOCK) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of {}, got {}",
                generators::BLOCK,
                self.image_size
            )));
        }
        Ok(())
    }

    /// Every record of the corpus, in manifest order.
    pub fn records(&self) -> Vec<LabeledImage> {
        let mut out = Vec::new();
        let mut cell = |split: Split, generator: GeneratorTag, n: usize| {
            for i in 0..n {
                out.push(LabeledImage {
                    path: PathBuf::from(format!("{}/{}/{i:05}.ppm", split.as_str(), generator.dir_name())),
                    label: if generator.is_fake() { Label::Fake } else { Label::Real },
                    generator,
                    split,
                });
            }
        };
        cell(Split::Train, GeneratorTag::Real, self.n_train);
        cell(Split::Train, GeneratorTag::GTrain, self.n_train);
        cell(Split::Test, GeneratorTag::Real, self.n_test);
        for g in GeneratorTag::TEST_FAKES {
            cell(Split::Test, g, self.n_test);
        }
        out
    }
}

/// Renders the image behind `record` from its own RNG stream.
pub fn render_record(cfg: &CorpusConfig, record: &LabeledImage) -> Result<Tensor> {
    let label = format!(
        "corpus/{}/{}/{}",
        record.split.as_str(),
        record.generator,
        record.path.display()
    );
    let mut rng = Rng::stream(cfg.seed, &label);
    render(record.generator, cfg.image_size, cfg.seed, &mut rng)
}

pub fn render_bytes(cfg: &CorpusConfig, record: &LabeledImage) -> Result<Vec<u8>> {
    ppm::encode(&render_record(cfg, record)?)
}

/// Writes every image, `manifest.jsonl` and `corpus.json` under `out_dir`.
pub fn generate_corpus(out_dir: &Path, cfg: &CorpusConfig) -> Result<Manifest> {
    cfg.validate()?;
    let records = cfg.records();
    for split in [Split::Train, Split::Test] {
        for g in GeneratorTag::ALL {
            let dir = out_dir.join(split.as_str()).join(g.dir_name());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    records.par_iter().try_for_each(|r| {
        let path = out_dir.join(&r.path);
        fs::write(&path, render_bytes(cfg, r)?).map_err(|e| Error::io(&path, e))
    })?;
    let manifest = Manifest::new(out_dir.to_path_buf(), records, Some(cfg.clone()))?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    let corpus_path = out_dir.join(CORPUS_FILE);
    let meta = serde_json::json!({
        "config": cfg,
        "counts": manifest.counts(),
    });
    fs::write(&corpus_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&corpus_path, e))?;
    Ok(manifest)
}

/// Regenerates the corpus in memory and lists files under `out_dir` whose
/// bytes differ (or are missing).
pub fn verify_corpus(out_dir: &Path, cfg: &CorpusConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let records = cfg.records();
    let bad: Vec<Option<PathBuf>> = records
        .par_iter()
        .map(|r| {
            let path = out_dir.join(&r.path);
            let expected = render_bytes(cfg, r)?;
            Ok(match fs::read(&path) {
                Ok(found) if found == expected => None,
                _ => Some(path),
            })
        })
        .collect::<Result<_>>()?;
    let mut bad: Vec<PathBuf> = bad.into_iter().flatten().collect();
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let expected = Manifest::new(out_dir.to_path_buf(), records, Some(cfg.clone()))?.to_jsonl()?;
    if fs::read_to_string(&manifest_path).ok().as_deref() != Some(expected.as_str()) {
        bad.push(manifest_path);
    }
    Ok(bad)
}
