use laspet_neural::infer::{gaussian_importance, infer_probabilities, sliding_window_infer, window_starts, InferConfig};
use laspet_neural::params::normal_tensor;
use laspet_neural::{LasNetConfig, LasNetParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    normal_tensor(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn single_patch_volume_is_passed_through() {
    let x = randn(&[2, 4, 4, 4], 1);
    let cfg = InferConfig::default();
    let (p1, p2) = sliding_window_infer(&x, &x, 4, &cfg, |a, _| {
        let p = a.map(|v| 1.0 / (1.0 + (-v).exp()));
        let first = Tensor::new(&[1, 4, 4, 4], p.data()[..64].to_vec())?;
        Ok((first.clone(), first.map(|v| 1.0 - v)))
    })
    .unwrap();
    for i in 0..64 {
        let e = 1.0 / (1.0 + (-x.data()[i]).exp());
        assert!((p1.data()[i] - e).abs() < 1e-12);
        assert!((p2.data()[i] - (1.0 - e)).abs() < 1e-12);
    }
}

#[test]
fn constant_predictor_gives_constant_map() {
    let x = Tensor::zeros(&[2, 13, 9, 17]);
    let (p1, p2) = sliding_window_infer(&x, &x, 6, &InferConfig::default(), |_, _| {
        Ok((Tensor::full(&[1, 6, 6, 6], 0.3), Tensor::full(&[1, 6, 6, 6], 0.8)))
    })
    .unwrap();
    assert_eq!(p1.shape(), &[1, 13, 9, 17]);
    assert!(p1.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    assert!(p2.data().iter().all(|&v| (v - 0.8).abs() < 1e-12));
}

#[test]
fn two_patch_overlap_is_gaussian_weighted_mean() {
    let cfg = InferConfig {
        overlap: 0.5,
        ..Default::default()
    };
    let p = 4;
    assert_eq!(window_starts(6, p, cfg.overlap), vec![0, 2]);
    let x = Tensor::zeros(&[2, 4, 4, 6]);
    let mut calls = 0;
    let values = [0.2, 0.9];
    let (out, _) = sliding_window_infer(&x, &x, p, &cfg, |_, _| {
        let v = values[calls];
        calls += 1;
        Ok((Tensor::full(&[1, 4, 4, 4], v), Tensor::full(&[1, 4, 4, 4], v)))
    })
    .unwrap();
    assert_eq!(calls, 2);
    let w = gaussian_importance(p, cfg.sigma_scale);
    for z in 0..4 {
        for y in 0..4 {
            for xx in 0..6 {
                let mut num = 0.0;
                let mut den = 0.0;
                for (k, &x0) in [0usize, 2].iter().enumerate() {
                    if xx >= x0 && xx < x0 + p {
                        let wk = w[(z * p + y) * p + xx - x0];
                        num += wk * values[k];
                        den += wk;
                    }
                }
                let got = out.data()[(z * 4 + y) * 6 + xx];
                assert!((got - num / den).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn network_inference_on_larger_volume() {
    let cfg = LasNetConfig {
        base_dim: 4,
        depths: vec![1, 1],
        heads: vec![1, 1],
        patch_size: 12,
        ..Default::default()
    };
    let params = LasNetParams::init(&cfg, 0).unwrap();
    let x = randn(&[2, 10, 14, 16], 3).map(|v| v.abs().min(1.0));
    let (p1, p2) = infer_probabilities(&params, &x, &x, &InferConfig::default()).unwrap();
    assert_eq!(p1.shape(), &[1, 10, 14, 16]);
    assert!(p1.data().iter().chain(p2.data()).all(|&v| (0.0..=1.0).contains(&v)));
}
