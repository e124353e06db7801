// Binary format round-trips and byte-level determinism.

use std::path::PathBuf;

use bdris_core::channel::{build_dataset, ChannelModelConfig, Role};
use bdris_core::io::{read_checkpoint, read_dataset, write_checkpoint, write_dataset};
use bdris_core::models::{MethodTag, ModelHyper};
use bdris_core::physics::SystemConfig;
use bdris_core::train::{evaluate_bundle, train_joint, TrainConfig};

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("bdris-fmt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn micro_bundle(seed: u64) -> bdris_core::models::ModelBundle {
    let cfg = SystemConfig::micro();
    let model = ChannelModelConfig::default();
    let train = build_dataset(&cfg, &model, 6, Role::Train, 0).unwrap();
    let val = build_dataset(&cfg, &model, 3, Role::Validation, 1_000).unwrap();
    let mut tc = TrainConfig::desk_scale(seed);
    tc.batch_size = 3;
    tc.max_epochs = 2;
    train_joint(&train, &val, &cfg, &ModelHyper::micro(), &tc, MethodTag::Jtsmlcef, |_| {})
        .unwrap()
}

#[test]
fn dataset_roundtrip_and_determinism() {
    let cfg = SystemConfig::micro();
    let model = ChannelModelConfig::default();
    let split = build_dataset(&cfg, &model, 5, Role::Test, 42).unwrap();
    let p1 = tmp("ds1.bdrs");
    let p2 = tmp("ds2.bdrs");
    write_dataset(&split, &p1).unwrap();
    let loaded = read_dataset(&p1).unwrap();
    assert_eq!(loaded.role, Role::Test);
    assert_eq!(loaded.seed_base, 42);
    assert_eq!(loaded.system, cfg);
    assert_eq!(loaded.samples.len(), 5);
    for (a, b) in loaded.samples.iter().zip(&split.samples) {
        assert_eq!(a, b);
    }
    // regenerating and rewriting produces identical bytes
    let again = build_dataset(&cfg, &model, 5, Role::Test, 42).unwrap();
    write_dataset(&again, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn dataset_rejects_tampering() {
    let cfg = SystemConfig::micro();
    let model = ChannelModelConfig::default();
    let split = build_dataset(&cfg, &model, 2, Role::Train, 7).unwrap();
    let p = tmp("ds_tamper.bdrs");
    write_dataset(&split, &p).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    let mid = bytes.len() - 9; // inside the last sample's label data
    bytes[mid] ^= 0x40;
    std::fs::write(&p, &bytes).unwrap();
    let err = read_dataset(&p).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains("labels") || msg.contains("format"),
        "unexpected error: {msg}"
    );
}

#[test]
fn checkpoint_roundtrip_preserves_everything() {
    let bundle = micro_bundle(11);
    let p = tmp("ck1.bdmc");
    write_checkpoint(&bundle, &p).unwrap();
    let loaded = read_checkpoint(&p).unwrap();
    assert_eq!(loaded.system, bundle.system);
    assert_eq!(loaded.hyper, bundle.hyper);
    assert_eq!(loaded.method, bundle.method);
    assert_eq!(loaded.train_seed, bundle.train_seed);
    assert_eq!(loaded.p_u_interval_dbm, bundle.p_u_interval_dbm);
    assert_eq!(loaded.norm, bundle.norm);
    assert_eq!(loaded.phase1_seed, bundle.phase1_seed);
    assert_eq!(loaded.phase1_susceptance, bundle.phase1_susceptance);
    assert_eq!(loaded.store.len(), bundle.store.len());
    for ((na, ta), (nb, tb)) in loaded.store.iter().zip(bundle.store.iter()) {
        assert_eq!(na, nb);
        let ba: Vec<u64> = ta.data().iter().map(|x| x.to_bits()).collect();
        let bb: Vec<u64> = tb.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(ba, bb, "parameter {na} changed across the round trip");
    }
    // the reloaded bundle evaluates identically
    let cfg = SystemConfig::micro();
    let test = build_dataset(&cfg, &ChannelModelConfig::default(), 4, Role::Test, 5_000).unwrap();
    let a = evaluate_bundle(&bundle, &test, 3, None);
    let b = evaluate_bundle(&loaded, &test, 3, None);
    assert_eq!(a.nmse.to_bits(), b.nmse.to_bits());
}

#[test]
fn same_seed_identical_checkpoint_bytes() {
    let p1 = tmp("ck_det1.bdmc");
    let p2 = tmp("ck_det2.bdmc");
    write_checkpoint(&micro_bundle(21), &p1).unwrap();
    write_checkpoint(&micro_bundle(21), &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    // a different seed changes the bytes
    let p3 = tmp("ck_det3.bdmc");
    write_checkpoint(&micro_bundle(22), &p3).unwrap();
    assert_ne!(std::fs::read(&p1).unwrap(), std::fs::read(&p3).unwrap());
}

#[test]
fn checkpoint_rejects_bad_magic() {
    let p = tmp("ck_bad.bdmc");
    std::fs::write(&p, b"NOPE....").unwrap();
    assert!(read_checkpoint(&p).is_err());
}
