mod common;

use std::collections::BTreeMap;

use common::{rng, uniform};
use mlfcgan::optim::{AdamConfig, AdamState};
use mlfcgan::params::ParamStore;
use mlfcgan::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn store(t: Tensor) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("w", t);
    p
}

fn grads(t: Tensor) -> BTreeMap<String, Tensor> {
    BTreeMap::from([("w".to_string(), t)])
}

/// Textbook Adam in f64 on a single coordinate sequence.
fn reference(cfg: AdamConfig, p0: f64, gs: &[f64]) -> f64 {
    let (lr, b1, b2, eps) = (cfg.lr as f64, cfg.beta1 as f64, cfg.beta2 as f64, cfg.eps as f64);
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    for (k, g) in gs.iter().enumerate() {
        let t = (k + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        p -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
    }
    p
}

#[test]
fn matches_reference_recursion() {
    let mut r = rng(21);
    let cfg = AdamConfig::default();
    let steps = 60;
    let seq: Vec<Tensor> = (0..steps).map(|_| uniform(&mut r, &[8], -2.0, 2.0)).collect();
    let mut p = store(Tensor::zeros(&[8]));
    let mut s = AdamState::new(cfg, &p);
    for g in &seq {
        s.step(&mut p, &grads(g.clone())).unwrap();
    }
    for i in 0..8 {
        let gs: Vec<f64> = seq.iter().map(|g| g.data()[i] as f64).collect();
        let want = reference(cfg, 0.0, &gs);
        let got = p.get("w").unwrap().data()[i] as f64;
        assert!((got - want).abs() < 1e-7, "coord {i}: {got} vs {want}");
    }
}

#[test]
fn updates_are_deterministic() {
    let run = || {
        let mut r = rng(2);
        let mut p = store(uniform(&mut r, &[4, 4], -1.0, 1.0));
        let mut s = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..20 {
            s.step(&mut p, &grads(uniform(&mut r, &[4, 4], -1.0, 1.0))).unwrap();
        }
        (p, s)
    };
    let (a, b) = (run(), run());
    assert!(a.0.get("w").unwrap().bit_eq(b.0.get("w").unwrap()));
    assert_eq!(a.1, b.1);
}

#[test]
fn bad_gradients_are_rejected() {
    let mut p = store(Tensor::zeros(&[3]));
    let mut s = AdamState::new(AdamConfig::default(), &p);
    assert!(s.step(&mut p, &grads(Tensor::zeros(&[4]))).is_err());
    let unknown = BTreeMap::from([("nope".to_string(), Tensor::zeros(&[3]))]);
    assert!(s.step(&mut p, &unknown).is_err());
    assert!(AdamConfig { beta1: 1.0, ..AdamConfig::default() }.validate().is_err());
}

proptest! {
    #[test]
    fn step_is_bounded_by_lr_for_constant_magnitude(seed in any::<u64>(), mag in 1e-3f32..10.0) {
        let mut r = rng(seed);
        let cfg = AdamConfig::default();
        let mut p = store(Tensor::zeros(&[1]));
        let mut s = AdamState::new(cfg, &p);
        for _ in 0..40 {
            let before = p.get("w").unwrap().data()[0];
            let g = if r.random_bool(0.5) { mag } else { -mag };
            s.step(&mut p, &grads(Tensor::new(vec![1], vec![g]).unwrap())).unwrap();
            let delta = (p.get("w").unwrap().data()[0] - before).abs();
            prop_assert!(delta <= cfg.lr * (1.0 + 1e-3), "{delta}");
        }
    }
}
