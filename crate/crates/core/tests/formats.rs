mod common;

use std::fs;

use common::{moving, tiny_model};
use specast::checkpoint::Checkpoint;
use specast::dataio::Split;
use specast::metrics::{evaluate, EvalOptions, EvalReport};
use specast::train::{train, TrainConfig, TrainOptions};
use specast::{Dataset, Error, Exec};

#[test]
fn dataset_round_trip_is_bit_exact() {
    let data = moving(30, 11);
    let dir = tempfile::tempdir().unwrap();
    let path = data.save(dir.path(), false).unwrap();
    let back = Dataset::load(&path).unwrap();
    assert_eq!(back, data);
    assert_eq!(back.checksum(), data.checksum());
    assert!(back.generator.is_some());
}

#[test]
fn existing_dataset_is_not_overwritten() {
    let data = moving(20, 12);
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path(), false).unwrap();
    assert!(matches!(
        data.save(dir.path(), false),
        Err(Error::InvalidInput(_))
    ));
    data.save(dir.path(), true).unwrap();
}

fn saved(seed: u64) -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
    let data = moving(20, seed);
    let dir = tempfile::tempdir().unwrap();
    let manifest = data.save(dir.path(), false).unwrap();
    let payload = dir.path().join(data.manifest().payload);
    (dir, manifest, payload)
}

#[test]
fn truncated_payload_is_rejected() {
    let (_dir, manifest, payload) = saved(13);
    let bytes = fs::read(&payload).unwrap();
    fs::write(&payload, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(Dataset::load(&manifest), Err(Error::CorruptDataset(_))));
}

#[test]
fn flipped_payload_bit_is_rejected() {
    let (_dir, manifest, payload) = saved(14);
    let mut bytes = fs::read(&payload).unwrap();
    bytes[100] ^= 0x01;
    fs::write(&payload, &bytes).unwrap();
    match Dataset::load(&manifest) {
        Err(Error::CorruptDataset(msg)) => assert!(msg.contains("checksum"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn manifest_variable_count_mismatch_is_rejected() {
    let (_dir, manifest, _) = saved(15);
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    m["var_names"].as_array_mut().unwrap().pop();
    fs::write(&manifest, m.to_string()).unwrap();
    assert!(matches!(Dataset::load(&manifest), Err(Error::CorruptDataset(_))));
}

#[test]
fn unknown_format_version_is_rejected() {
    let (_dir, manifest, _) = saved(16);
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    m["format_version"] = 99.into();
    fs::write(&manifest, m.to_string()).unwrap();
    assert!(matches!(Dataset::load(&manifest), Err(Error::CorruptDataset(_))));
}

#[test]
fn checkpoint_file_reproduces_forecasts() {
    let data = moving(50, 17);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        exec: Exec::Sequential,
        out_dir: Some(dir.path().to_path_buf()),
        ..TrainOptions::default()
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let out = train(&data, &tiny_model(), &cfg, &opts).unwrap();
    let ckpt = Checkpoint::load(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(ckpt.config_hash, out.config_hash);
    let model = ckpt.model().unwrap();
    let window = data.window(data.range(Split::Test).start, 2).unwrap();
    assert_eq!(
        model.forecast(&window).unwrap(),
        out.last.model.forecast(&window).unwrap()
    );

    let mut bytes = fs::read(dir.path().join("best.ckpt")).unwrap();
    let k = bytes.len() - 40;
    bytes[k] ^= 0x80;
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(Error::CorruptCheckpoint(_))
    ));
}

#[test]
fn report_survives_json_round_trip() {
    let data = moving(60, 18);
    let opts = EvalOptions {
        lead_hours: vec![6.0, 12.0],
        exec: Exec::Sequential,
        ..EvalOptions::default()
    };
    let report = evaluate(None, &data, "baselines", &opts).unwrap();
    let back: EvalReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(back, report);
    assert_eq!(report.to_csv().lines().count(), 1 + report.entries.len());
    assert!(report.get("persistence", "t2m", 2).is_some());
}
