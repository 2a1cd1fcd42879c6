use std::fs;

use capdet_core::checkpoint::{build_model, load_checkpoint, load_meta, save_checkpoint, sidecar_path, ModelKind};
use capdet_core::lora::LoraConfig;
use capdet_core::metrics::Detector;
use capdet_core::model::ModelConfig;
use capdet_core::rng::Rng;
use capdet_core::{Error, Tensor};

fn config() -> ModelConfig {
    ModelConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        bridge_layers: 1,
        ..ModelConfig::default()
    }
}

#[test]
fn every_kind_round_trips_byte_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(4);
    let image = Tensor::randn(&[3, 32, 32], 0.3, &mut rng);
    for kind in ModelKind::ALL {
        let model = build_model(kind, &config(), &LoraConfig::default(), 8).unwrap();
        let path = dir.path().join(format!("{kind}.tensors"));
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, model, "{kind}");
        assert_eq!(back.params().mask(), model.params().mask());
        assert_eq!(back.detect(&image).unwrap(), model.detect(&image).unwrap());

        let again = dir.path().join(format!("{kind}-2.tensors"));
        save_checkpoint(&back, &again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
        assert_eq!(
            fs::read(sidecar_path(&path)).unwrap(),
            fs::read(sidecar_path(&again)).unwrap()
        );

        let meta = load_meta(&path).unwrap();
        assert_eq!(meta.kind, kind);
        assert_eq!(meta.lora.is_some(), kind == ModelKind::LoraQb);
        assert_eq!(meta.vocabulary.is_empty(), kind.baseline().is_some());
    }
}

#[test]
fn edited_config_fails_the_hash_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tensors");
    save_checkpoint(
        &build_model(ModelKind::Qb, &config(), &LoraConfig::default(), 1).unwrap(),
        &path,
    )
    .unwrap();
    let sp = sidecar_path(&path);
    let mut meta: serde_json::Value = serde_json::from_slice(&fs::read(&sp).unwrap()).unwrap();
    meta["config"]["d_model"] = 32.into();
    fs::write(&sp, serde_json::to_vec(&meta).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::ConfigHash { .. })));
}

#[test]
fn damaged_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tensors");
    let model = build_model(ModelKind::Conv, &config(), &LoraConfig::default(), 1).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let bytes = fs::read(&path).unwrap();

    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());

    fs::write(&path, &bytes).unwrap();
    let sp = sidecar_path(&path);
    let good = fs::read_to_string(&sp).unwrap();
    fs::write(&sp, good.replacen('{', "{\"surprise\": 1,", 1)).unwrap();
    assert!(load_checkpoint(&path).is_err());

    fs::write(&sp, good.replace("\"conv\"", "\"qb\"")).unwrap();
    assert!(load_checkpoint(&path).is_err());

    fs::remove_file(&sp).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Io { .. })));
}
