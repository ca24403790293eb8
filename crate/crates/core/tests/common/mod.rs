#![allow(dead_code)]

pub mod critics;
pub mod oracles;
pub mod suite;

use mlfcgan::autodiff::{Tape, Var};
use mlfcgan::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f32 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values with magnitude at least `gap`, random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Multiples of 1/8 in [-2, 2]: sums and products of a few of these are
/// exact in f32 whatever the order.
pub fn dyadic(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-16i32..=16) as f32 / 8.0)
}

pub fn dot64(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

pub fn norm64(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Below this norm a gradient counts as zero: errors are measured against
/// it instead, so a bias that a normalization cancels is not compared noise
/// against noise.
pub const GRAD_FLOOR: f64 = 1e-3;

/// `||a - b|| / max(||a||, ||b||, GRAD_FLOOR)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm64(&diff) / norm64(a).max(norm64(b)).max(GRAD_FLOOR)
}

/// Compares the tape's gradient of `<f(inputs), r>` with central differences
/// over up to `max_coords` coordinates of each input. Returns the norm-wise
/// relative error of the sampled gradient vector, all inputs together.
pub fn grad_check<F>(inputs: &[Tensor], f: F, seed: u64, max_coords: usize) -> f64
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed);
    let eval = |vals: &[Tensor], weights: &Tensor| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars).expect("forward");
        dot64(&tape.value(out), weights)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars).expect("forward");
    let weights = uniform(&mut r, &tape.shape(out), -1.0, 1.0);
    let w = tape.constant(weights.clone());
    let loss = tape.sum(tape.mul(out, w).unwrap()).unwrap();
    let grads = tape.grad(loss, &vars, false).unwrap();

    let mut a = Vec::new();
    let mut fd = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.value(grads[k]);
        let n = input.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| r.random_range(0..n)).collect()
        };
        for &i in &coords {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let h = (plus[k].data()[i] as f64 - minus[k].data()[i] as f64) / 2.0;
            fd.push((eval(&plus, &weights) - eval(&minus, &weights)) / (2.0 * h));
            a.push(analytic.data()[i] as f64);
        }
    }
    rel_err(&a, &fd)
}
