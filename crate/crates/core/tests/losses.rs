mod common;

use common::critics::Linear;
use common::{rng, uniform};
use mlfcgan::losses::{critic_loss, generator_loss, l1_loss, mse_loss, LossWeights};
use mlfcgan::{Tape, Tensor};
use proptest::prelude::*;

fn unit_kernel(shape: [usize; 3]) -> Tensor {
    let mut w = Tensor::zeros(&[1, shape[0], shape[1], shape[2]]);
    w.data_mut()[0] = 1.0;
    w
}

#[test]
fn critic_loss_arithmetic() {
    let tape = Tape::new();
    let critic = Linear { w: tape.constant(unit_kernel([3, 4, 4])) };
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let mut y = Tensor::zeros(&[1, 3, 4, 4]);
    y.data_mut()[0] = 0.6;
    let mut g = Tensor::zeros(&[1, 3, 4, 4]);
    g.data_mut()[0] = -0.5;
    let (y, g) = (tape.constant(y), tape.constant(g));
    let l = critic_loss(&tape, &critic, x, y, g, &[0.5], &LossWeights::default()).unwrap();
    assert!((tape.item(l.real).unwrap() - 0.6).abs() < 1e-6);
    assert!((tape.item(l.fake).unwrap() + 0.5).abs() < 1e-6);
    assert_eq!(tape.item(l.penalty).unwrap(), 0.0);
    assert!((tape.item(l.total).unwrap() + 1.1).abs() < 1e-6);
}

#[test]
fn generator_loss_is_adv_plus_weighted_l1() {
    let mut r = rng(4);
    let tape = Tape::new();
    let critic = Linear { w: tape.constant(uniform(&mut r, &[1, 3, 4, 4], -1.0, 1.0)) };
    let x = tape.constant(uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0));
    let y = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    let gx = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
    let w = LossWeights::default();
    let l = generator_loss(&tape, &critic, x, tape.constant(y.clone()), tape.constant(gx.clone()), &w).unwrap();

    let wk = tape.value(critic.w);
    let mut adv = 0.0f64;
    for n in 0..2 {
        let s: f64 = (0..48).map(|i| wk.data()[i] as f64 * gx.data()[n * 48 + i] as f64).sum();
        adv -= s / 2.0;
    }
    let l1: f64 = y.data().iter().zip(gx.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / 96.0;
    assert!((tape.item(l.adv).unwrap() as f64 - adv).abs() < 1e-5);
    assert!((tape.item(l.l1).unwrap() as f64 - l1).abs() < 1e-6);
    let recomputed = tape.item(l.adv).unwrap() + w.lambda_l1 * tape.item(l.l1).unwrap();
    assert_eq!(tape.item(l.total).unwrap(), recomputed);
}

#[test]
fn shape_mismatch_is_an_error() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let b = tape.constant(Tensor::zeros(&[1, 3, 4, 2]));
    assert!(l1_loss(&tape, a, b).is_err());
    assert!(mse_loss(&tape, a, b).is_err());
}

#[test]
fn penalty_eps_is_validated() {
    let tape = Tape::new();
    let critic = Linear { w: tape.constant(unit_kernel([3, 2, 2])) };
    let z = tape.constant(Tensor::zeros(&[2, 3, 2, 2]));
    let w = LossWeights::default();
    assert!(critic_loss(&tape, &critic, z, z, z, &[0.5], &w).is_err());
    assert!(critic_loss(&tape, &critic, z, z, z, &[0.5, 1.5], &w).is_err());
}

proptest! {
    #[test]
    fn l1_matches_direct_sum(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
        let b = uniform(&mut r, &[2, 3, 3, 3], -1.0, 1.0);
        let tape = Tape::new();
        let l = tape.item(l1_loss(&tape, tape.constant(a.clone()), tape.constant(b.clone())).unwrap()).unwrap();
        let want: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / 54.0;
        prop_assert!((l as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn swapping_real_and_fake_negates_unpenalized_loss(seed in any::<u64>()) {
        let mut r = rng(seed);
        let tape = Tape::new();
        let critic = Linear { w: tape.constant(uniform(&mut r, &[1, 3, 4, 4], -1.0, 1.0)) };
        let x = tape.constant(uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0));
        let y = tape.constant(uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0));
        let g = tape.constant(uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0));
        let w = LossWeights { lambda_gp: 0.0, ..LossWeights::default() };
        let a = tape.item(critic_loss(&tape, &critic, x, y, g, &[0.3, 0.7], &w).unwrap().total).unwrap();
        let b = tape.item(critic_loss(&tape, &critic, x, g, y, &[0.3, 0.7], &w).unwrap().total).unwrap();
        prop_assert!((a + b).abs() < 1e-6);
    }
}
