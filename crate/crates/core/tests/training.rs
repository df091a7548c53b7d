use std::collections::HashSet;

use mmscore::config::{Config, PartitionSchedule};
use mmscore::io::{checkpoint_to_bytes, load_checkpoint, save_checkpoint};
use mmscore::modality::enumerate_partitions;
use mmscore::net::NetConfig;
use mmscore::oracle::GaussianWorld;
use mmscore::train::TrainState;
use mmscore::Error;

fn gaussian_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.net = NetConfig {
        widths: vec![16],
        embed_dim: 16,
    };
    cfg.train.batch_size = 32;
    cfg.train.seed = seed;
    cfg
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[test]
fn loss_decreases_on_gaussian_world() {
    let world = GaussianWorld::correlated3();
    let data = world.sample_joint(2000, 1).unwrap();
    let mut state = TrainState::new(gaussian_config(3), data.modalities.clone()).unwrap();
    let losses = state.train_until(&data, 1000, |_| {}).unwrap();
    let early = median(&losses[..100]);
    let late = median(&losses[900..]);
    assert!(late < early, "median loss went from {early} to {late}");
    assert!(losses.iter().all(|l| l.is_finite() && *l >= 0.0));
}

#[test]
fn fixed_seed_gives_identical_traces() {
    let data = GaussianWorld::correlated3().sample_joint(500, 2).unwrap();
    let run = || {
        let mut s = TrainState::new(gaussian_config(7), data.modalities.clone()).unwrap();
        let mut parts = Vec::new();
        let losses = s.train_until(&data, 60, |r| parts.push(r.partition.bitmask())).unwrap();
        (losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(), parts)
    };
    assert_eq!(run(), run());
    let mut other = TrainState::new(gaussian_config(8), data.modalities.clone()).unwrap();
    let other_losses = other.train_until(&data, 60, |_| {}).unwrap();
    assert_ne!(run().0, other_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>());
}

#[test]
fn uniform_schedule_visits_every_partition() {
    // 100 * N_A steps must see every partition; check over many seeds.
    let data = GaussianWorld::correlated3().sample_joint(10, 0).unwrap();
    let n_a = enumerate_partitions(3).unwrap().len();
    let mut counts = vec![0usize; 1 << 3];
    for seed in 0..50 {
        let state = TrainState::new(gaussian_config(seed), data.modalities.clone()).unwrap();
        let mut seen = HashSet::new();
        for step in 0..(100 * n_a) as u64 {
            let bits = state.draws_for_step(&data, step).unwrap().partition.bitmask();
            seen.insert(bits);
            counts[bits as usize] += 1;
        }
        assert_eq!(seen.len(), n_a, "seed {seed}");
    }
    // Roughly uniform: each of the 6 partitions gets 1/6 of 30000 draws.
    let total: usize = counts.iter().sum();
    for (bits, &c) in counts.iter().enumerate() {
        if bits == 0 || bits == 7 {
            assert_eq!(c, 0);
        } else {
            let frac = c as f64 / total as f64;
            assert!((frac - 1.0 / 6.0).abs() < 0.01, "partition {bits:03b}: {frac}");
        }
    }
}

#[test]
fn cycle_schedule_round_robins() {
    let data = GaussianWorld::correlated3().sample_joint(10, 0).unwrap();
    let mut cfg = gaussian_config(1);
    cfg.train.partition_schedule = PartitionSchedule::Cycle;
    let state = TrainState::new(cfg, data.modalities.clone()).unwrap();
    let parts = enumerate_partitions(3).unwrap();
    for step in 0..18u64 {
        let p = state.draws_for_step(&data, step).unwrap().partition;
        assert_eq!(p, parts[step as usize % parts.len()]);
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let data = GaussianWorld::correlated3().sample_joint(100, 3).unwrap();
    let mut state = TrainState::new(gaussian_config(4), data.modalities.clone()).unwrap();
    state.train_until(&data, 5, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.mmck"), dir.path().join("b.mmck"));
    save_checkpoint(&state, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded, state);
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let data = GaussianWorld::correlated3().sample_joint(10, 3).unwrap();
    let state = TrainState::new(gaussian_config(4), data.modalities.clone()).unwrap();
    let bytes = checkpoint_to_bytes(&state);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.mmck");

    let mut wrong_magic = bytes.clone();
    wrong_magic[..4].copy_from_slice(b"XXXX");
    std::fs::write(&path, &wrong_magic).unwrap();
    match load_checkpoint(&path) {
        Err(Error::Format { path: p, .. }) => assert_eq!(p, path),
        other => panic!("expected format error, got {other:?}"),
    }

    let mut wrong_version = bytes.clone();
    wrong_version[4] = 99;
    std::fs::write(&path, &wrong_version).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Corruption { .. })));
}

#[test]
fn resumed_training_matches_unbroken_run() {
    let data = GaussianWorld::correlated3().sample_joint(300, 5).unwrap();
    let cfg = gaussian_config(9);
    let mut unbroken = TrainState::new(cfg.clone(), data.modalities.clone()).unwrap();
    let full = unbroken.train_until(&data, 40, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.mmck");
    let mut first = TrainState::new(cfg, data.modalities.clone()).unwrap();
    first.train_until(&data, 25, |_| {}).unwrap();
    save_checkpoint(&first, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    let rest = resumed.train_until(&data, 40, |_| {}).unwrap();

    assert_eq!(rest[0].to_bits(), full[25].to_bits());
    assert_eq!(&full[25..], &rest[..]);
    assert_eq!(resumed, unbroken);
}
