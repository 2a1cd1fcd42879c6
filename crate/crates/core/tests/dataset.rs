use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use capdet_core::caption::Label;
use capdet_core::dataset::stats::{logistic_accuracy, mean_gap_sigma};
use capdet_core::dataset::{
    designed_statistic, generate_corpus, ppm, read_image, render, verify_corpus, CorpusConfig, GeneratorTag,
    LabeledImage, Manifest, Split, MANIFEST_FILE,
};
use capdet_core::rng::Rng;
use capdet_core::{Error, Tensor};
use proptest::prelude::*;

fn small() -> CorpusConfig {
    CorpusConfig {
        n_train: 6,
        n_test: 3,
        image_size: 32,
        seed: 5,
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_counts() {
    let records = CorpusConfig::default().records();
    let count = |s: Split, g: GeneratorTag| records.iter().filter(|r| r.split == s && r.generator == g).count();
    assert_eq!(records.iter().filter(|r| r.split == Split::Train).count(), 2000);
    assert_eq!(count(Split::Train, GeneratorTag::Real), 1000);
    assert_eq!(count(Split::Test, GeneratorTag::Real), 250);
    for g in GeneratorTag::TEST_FAKES {
        assert_eq!(count(Split::Test, g), 250);
    }
    assert_eq!(records.len(), 2000 + 250 + 7 * 250);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_corpus(a.path(), &small()).unwrap();
    generate_corpus(b.path(), &small()).unwrap();
    assert_eq!(files(a.path()), files(b.path()));

    let c = tempfile::tempdir().unwrap();
    generate_corpus(c.path(), &CorpusConfig { seed: 6, ..small() }).unwrap();
    assert_ne!(files(a.path()), files(c.path()));
}

#[test]
fn verify_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(dir.path(), &small()).unwrap();
    assert!(verify_corpus(dir.path(), &small()).unwrap().is_empty());
    let victim = m.resolve(&m.records()[3]);
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&victim, bytes).unwrap();
    assert_eq!(verify_corpus(dir.path(), &small()).unwrap(), vec![victim]);
}

#[test]
fn manifest_round_trip_and_views() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_corpus(dir.path(), &small()).unwrap();
    let loaded = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded, m);
    assert_eq!(loaded.corpus(), Some(&small()));
    assert_eq!(
        loaded.to_jsonl().unwrap(),
        fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()
    );

    let gb = m.filter(Split::Test, GeneratorTag::GB);
    assert_eq!(gb.len(), 3);
    assert!(gb
        .iter()
        .all(|r| r.generator == GeneratorTag::GB && r.label == Label::Fake));
    let order: Vec<_> = m
        .records()
        .iter()
        .filter(|r| r.generator == GeneratorTag::GB)
        .cloned()
        .collect();
    assert_eq!(gb, order);

    let subset = m.test_subset(GeneratorTag::GB);
    assert_eq!(subset.len(), 6);
    assert_eq!(&subset[3..], m.filter(Split::Test, GeneratorTag::Real).as_slice());
}

#[test]
fn cells_are_disjoint() {
    let m = Manifest::new(PathBuf::from("."), small().records(), None).unwrap();
    let mut cell_of: HashMap<&Path, (Split, GeneratorTag)> = HashMap::new();
    for r in m.records() {
        assert!(cell_of.insert(&r.path, (r.split, r.generator)).is_none());
    }
    let real_pool = m.filter(Split::Test, GeneratorTag::Real);
    for g in GeneratorTag::TEST_FAKES {
        let s = m.test_subset(g);
        for r in &real_pool {
            assert_eq!(s.iter().filter(|x| *x == r).count(), 1);
        }
    }
    assert!(m
        .split(Split::Train)
        .iter()
        .all(|r| matches!(r.generator, GeneratorTag::Real | GeneratorTag::GTrain)));
}

fn write_manifest(dir: &Path, lines: &[String]) -> PathBuf {
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, lines.join("\n") + "\n").unwrap();
    p
}

fn line(path: &str, label: &str, generator: &str, split: &str) -> String {
    format!(r#"{{"path":"{path}","label":"{label}","generator":"{generator}","split":"{split}"}}"#)
}

#[test]
fn invalid_manifests_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let ok = [
        line("a.ppm", "real", "REAL", "train"),
        line("b.ppm", "fake", "G-TRAIN", "train"),
    ];

    let mislabeled = [ok[0].clone(), ok[1].clone(), line("c.ppm", "fake", "REAL", "test")];
    match Manifest::load(&write_manifest(dir.path(), &mislabeled)) {
        Err(Error::Manifest { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }

    let held_out = [line("x.ppm", "fake", "G-B", "train"), ok[0].clone()];
    match Manifest::load(&write_manifest(dir.path(), &held_out)) {
        Err(Error::Manifest { line, reason, .. }) => {
            assert_eq!(line, 1);
            assert!(reason.contains("G-B"));
        }
        other => panic!("{other:?}"),
    }

    let dup = [ok[0].clone(), ok[1].clone(), line("a.ppm", "real", "REAL", "test")];
    assert!(matches!(
        Manifest::load(&write_manifest(dir.path(), &dup)),
        Err(Error::Manifest { line: 3, .. })
    ));

    let garbage = [ok[0].clone(), "{\"path\": 3}".to_string()];
    assert!(matches!(
        Manifest::load(&write_manifest(dir.path(), &garbage)),
        Err(Error::Manifest { line: 2, .. })
    ));

    let extra = [r#"{"path":"a.ppm","label":"real","generator":"REAL","split":"train","x":1}"#.to_string()];
    assert!(Manifest::load(&write_manifest(dir.path(), &extra)).is_err());

    let unbalanced = [ok[0].clone()];
    assert!(Manifest::load(&write_manifest(dir.path(), &unbalanced)).is_err());
    assert!(Manifest::load(&write_manifest(dir.path(), &ok)).is_ok());
}

#[test]
fn records_serialize_with_the_documented_schema() {
    let r = LabeledImage {
        path: PathBuf::from("test/g-c/00001.ppm"),
        label: Label::Fake,
        generator: GeneratorTag::GC,
        split: Split::Test,
    };
    assert_eq!(
        serde_json::to_string(&r).unwrap(),
        r#"{"path":"test/g-c/00001.ppm","label":"fake","generator":"G-C","split":"test"}"#
    );
}

fn statistics(tag: GeneratorTag, stat_of: GeneratorTag, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mut rng = Rng::stream(42, &format!("stats-test/{tag}/{i}"));
            let img = render(tag, 32, 42, &mut rng).unwrap();
            designed_statistic(stat_of, &img)
        })
        .collect()
}

#[test]
fn every_generator_is_detectable_on_its_statistic() {
    for g in GeneratorTag::TEST_FAKES {
        let real = statistics(GeneratorTag::Real, g, 100);
        let fake = statistics(g, g, 100);
        let gap = mean_gap_sigma(&real, &fake);
        assert!(gap > 3.0, "{g}: gap {gap:.2} sigma");
    }
}

#[test]
fn training_pair_is_learnable() {
    let real = statistics(GeneratorTag::Real, GeneratorTag::GTrain, 200);
    let fake = statistics(GeneratorTag::GTrain, GeneratorTag::GTrain, 200);
    assert!(logistic_accuracy(&real, &fake) >= 0.9);
}

#[test]
fn logistic_oracle_on_separable_and_overlapping_data() {
    assert_eq!(logistic_accuracy(&[0.0, 0.1, 0.2], &[1.0, 1.1, 1.2]), 1.0);
    let same = [0.0, 1.0, 0.0, 1.0];
    assert!(logistic_accuracy(&same, &same) <= 0.5 + 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ppm_round_trip_within_one_level(seed in any::<u64>(), size in 1usize..12) {
        let mut rng = Rng::new(seed);
        let data: Vec<f32> = (0..3 * size * size).map(|_| rng.uniform()).collect();
        let img = Tensor::new(&[3, size, size], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        ppm::write(&p, &img).unwrap();
        let back = read_image(&p, size).unwrap();
        prop_assert!(img.max_abs_diff(&back) <= 1.0 / 255.0 + 1e-7);
    }
}
