//! Dataset persistence: lossless round trips, validation, hashing.

use tpd_core::error::DatasetError;
use tpd_core::synthdata::{gen_sample, read_dataset, write_dataset, GeneratorConfig};

fn make(cfg: &GeneratorConfig, n: usize) -> Vec<tpd_core::synthdata::TryOnSample> {
    (0..n as u64).map(|s| gen_sample(s, cfg).unwrap()).collect()
}

#[test]
fn write_read_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig::default();
    let samples = make(&cfg, 4);
    write_dataset(&samples, &cfg, dir.path()).unwrap();
    let (loaded, manifest) = read_dataset(dir.path()).unwrap();
    assert_eq!(manifest.count, 4);
    assert_eq!(manifest.config_hash, cfg.hash());
    assert_eq!(loaded.len(), samples.len());
    for (a, b) in loaded.iter().zip(&samples) {
        assert_eq!(a, b, "round trip must be lossless");
    }
}

#[test]
fn rewriting_is_byte_identical() {
    let dir1 = tempfile::tempdir().unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig::default();
    let samples = make(&cfg, 3);
    write_dataset(&samples, &cfg, dir1.path()).unwrap();
    write_dataset(&samples, &cfg, dir2.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(dir1.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let a = std::fs::read(dir1.path().join(&name)).unwrap();
        let b = std::fs::read(dir2.path().join(&name)).unwrap();
        assert_eq!(a, b, "file {name:?} differs between identical writes");
    }
}

#[test]
fn missing_file_is_reported_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig::default();
    let samples = make(&cfg, 2);
    write_dataset(&samples, &cfg, dir.path()).unwrap();
    let victim = dir.path().join("00001_pose.png");
    std::fs::remove_file(&victim).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    match err {
        tpd_core::Error::Dataset(DatasetError::MissingFile(p)) => {
            assert!(p.to_string_lossy().contains("00001_pose.png"), "names the file: {p:?}")
        }
        other => panic!("expected MissingFile, got {other}"),
    }
}

#[test]
fn tampered_manifest_hash_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GeneratorConfig::default();
    let samples = make(&cfg, 1);
    write_dataset(&samples, &cfg, dir.path()).unwrap();
    let mpath = dir.path().join("manifest.json");
    let text = std::fs::read_to_string(&mpath).unwrap();
    let tampered = text.replace("\"bbox_margin\": 1", "\"bbox_margin\": 2");
    assert_ne!(text, tampered, "test must actually change the config");
    std::fs::write(&mpath, tampered).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(
        matches!(err, tpd_core::Error::Dataset(DatasetError::HashMismatch { .. })),
        "got {err}"
    );
}

#[test]
fn config_hash_changes_iff_config_changes() {
    let a = GeneratorConfig::default();
    let b = GeneratorConfig::default();
    assert_eq!(a.hash(), b.hash());
    let c = GeneratorConfig { bbox_margin: 2, ..GeneratorConfig::default() };
    assert_ne!(a.hash(), c.hash());
    let d = GeneratorConfig { height: 36, ..GeneratorConfig::default() };
    assert_ne!(a.hash(), d.hash());
}
