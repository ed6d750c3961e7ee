use std::time::Instant;

use laspet_core::lesions::dice;
use laspet_core::phantom::{generate, PhantomConfig};
use laspet_core::Mask;
use laspet_neural::infer::{infer_probabilities, segment, InferConfig};
use laspet_neural::optim::OptimConfig;
use laspet_neural::train::{train_from, train_toy, Sample, TrainConfig};
use laspet_neural::{LasNetConfig, LasNetParams};

fn toy_phantom(seed: u64) -> laspet_core::phantom::PatientStudy {
    generate(&PhantomConfig {
        seed,
        dims: [24; 3],
        spacing_mm: [4.0; 3],
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn overfits_one_pair() {
    let study = toy_phantom(11);
    let net = LasNetConfig {
        base_dim: 6,
        depths: vec![1, 1, 1],
        ..Default::default()
    };
    let cfg = TrainConfig {
        steps: 150,
        seed: 5,
        augment: false,
        optim: OptimConfig {
            lr: 3e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let t0 = Instant::now();
    let out = train_toy(std::slice::from_ref(&study), &net, &cfg).unwrap();
    let trace = &out.loss_trace;
    let first = trace[0];
    let last = trace[trace.len() - 5..].iter().sum::<f64>() / 5.0;
    eprintln!("loss {first:.4} -> {last:.4} in {:.1}s", t0.elapsed().as_secs_f64());
    assert!(last < 0.5 * first);

    let sample = Sample::from_study(&study).unwrap();
    let icfg = InferConfig::default();
    let (p1, p2) = infer_probabilities(&out.params, &sample.x1, &sample.x2, &icfg).unwrap();
    let grid = *study.pet1.grid();
    let m1 = Mask::from_volume(&segment(&p1, grid, &icfg).unwrap());
    let m2 = Mask::from_volume(&segment(&p2, grid, &icfg).unwrap());
    let d1 = dice(&m1, &study.gt1.mask()).unwrap();
    let d2 = dice(&m2, &study.gt2.mask()).unwrap();
    eprintln!("dice {d1:.3} {d2:.3}");
    assert!(d1 > 0.8 && d2 > 0.8);
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let study = toy_phantom(3);
    let net = LasNetConfig {
        base_dim: 4,
        depths: vec![1, 1],
        heads: vec![1, 1],
        patch_size: 12,
        ..Default::default()
    };
    let params = LasNetParams::init(&net, 1).unwrap();
    let samples = vec![Sample::from_study(&study).unwrap()];
    let cfg = TrainConfig {
        steps: 3,
        augment: false,
        lesion_fraction: 1.0,
        optim: OptimConfig {
            lr: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = train_from(params.clone(), &samples, &cfg, |_, _| {}).unwrap();
    assert_eq!(out.params, params);
    assert_eq!(out.loss_trace.len(), 3);
}

#[test]
fn same_seed_same_trace() {
    let study = toy_phantom(4);
    let net = LasNetConfig {
        base_dim: 4,
        depths: vec![1, 1],
        heads: vec![1, 1],
        patch_size: 12,
        ..Default::default()
    };
    let cfg = TrainConfig {
        steps: 3,
        seed: 9,
        optim: OptimConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let a = train_toy(std::slice::from_ref(&study), &net, &cfg).unwrap();
    let b = train_toy(std::slice::from_ref(&study), &net, &cfg).unwrap();
    assert_eq!(a.loss_trace, b.loss_trace);
    assert_eq!(a.params, b.params);
}
