use std::fs;

use hnfnet::network::{cascade_param_count, param_count, CascadeConfig, NetConfig};
use hnfnet_io::config::ModelConfig;
use hnfnet_io::weights::{init_weights, load_model, read_weights, weight_paths, write_weights, LoadedModel};

fn toy() -> ModelConfig {
    ModelConfig::Single(NetConfig::toy_single())
}

#[test]
fn same_seed_same_bytes() {
    let a = init_weights(&toy(), 42).unwrap();
    let b = init_weights(&toy(), 42).unwrap();
    assert_eq!(a.content_hash(), b.content_hash());
    assert_eq!(a, b);
    assert_ne!(a.content_hash(), init_weights(&toy(), 43).unwrap().content_hash());
}

#[test]
fn scalar_count_equals_param_count() {
    let single = init_weights(&toy(), 1).unwrap();
    assert_eq!(single.scalar_count(), param_count(&NetConfig::toy_single()).unwrap());
    let cascade = init_weights(&ModelConfig::Cascade(CascadeConfig::toy()), 1).unwrap();
    assert_eq!(cascade.scalar_count(), cascade_param_count(&CascadeConfig::toy()).unwrap());
}

#[test]
fn bases_are_unit_norm_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w");
    write_weights(&path, &init_weights(&toy(), 5).unwrap()).unwrap();
    let file = read_weights(&path).unwrap();
    let store = file.to_store(&path).unwrap();
    let bases = store.get("ema.bases").expect("bases stored");
    let (rows, cols) = (bases.shape[0], bases.shape[1]);
    for k in 0..cols {
        let norm: f64 = (0..rows).map(|r| (bases.data[r * cols + k] as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5, "column {k}: {norm}");
    }
}

#[test]
fn roundtrip_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cascade.json");
    let cfg = ModelConfig::Cascade(CascadeConfig::toy());
    let file = init_weights(&cfg, 9).unwrap();
    write_weights(&path, &file).unwrap();
    assert_eq!(read_weights(&path).unwrap(), file);
    assert!(matches!(load_model(&path, &cfg).unwrap(), LoadedModel::Cascade(_)));
}

#[test]
fn config_hash_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w");
    write_weights(&path, &init_weights(&toy(), 1).unwrap()).unwrap();
    let other = ModelConfig::Single(NetConfig {
        leaky_alpha: 0.02,
        ..NetConfig::toy_single()
    });
    let err = load_model(&path, &other).err().unwrap();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("config_hash"));
}

fn edit_manifest(path: &std::path::Path, f: impl FnOnce(&mut serde_json::Value)) {
    let (manifest, _) = weight_paths(path);
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&manifest).unwrap()).unwrap();
    f(&mut v);
    fs::write(&manifest, serde_json::to_vec(&v).unwrap()).unwrap();
}

#[test]
fn bad_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w");
    let cases: [(&str, Box<dyn Fn(&mut serde_json::Value)>); 4] = [
        ("overlap", Box::new(|v| v["tensors"][1]["byte_offset"] = v["tensors"][0]["byte_offset"].clone())),
        ("exceed blob length", Box::new(|v| v["tensors"][0]["byte_offset"] = (1u64 << 40).into())),
        ("format_version", Box::new(|v| v["format_version"] = 2.into())),
        ("missing weight", Box::new(|v| drop(v["tensors"].as_array_mut().unwrap().pop()))),
    ];
    for (what, edit) in cases {
        write_weights(&path, &init_weights(&toy(), 1).unwrap()).unwrap();
        edit_manifest(&path, edit);
        let err = load_model(&path, &toy()).err().unwrap_or_else(|| panic!("{what} accepted"));
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains(what), "{what}: {err}");
    }
}

#[test]
fn extra_tensor_is_rejected() {
    let cfg = toy();
    let mut file = init_weights(&cfg, 1).unwrap();
    let offset = file.blob.len() as u64;
    file.blob.extend(0f32.to_le_bytes());
    file.manifest.tensors.push(hnfnet_io::weights::TensorEntry {
        name: "stray".into(),
        shape: vec![1],
        byte_offset: offset,
    });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w");
    write_weights(&path, &file).unwrap();
    let err = load_model(&path, &cfg).err().unwrap();
    assert!(err.to_string().contains("unexpected weight `stray`"), "{err}");
}
