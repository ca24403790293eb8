//! Finite-difference checks of every tape primitive and layer.

use mlfcgan::autodiff::{Tape, Var};
use mlfcgan::nn::{self, Conv2dParams, FusionUnit, ResidualBlockParams};
use mlfcgan::{Result, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{away_from_zero, grad_check, rng, uniform};

pub const INSTANCES: usize = 20;
pub const TOLERANCE: f64 = 1e-3;

type Forward = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;
type Make = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Forward);

pub struct Case {
    pub name: &'static str,
    pub make: Make,
}

fn dims(r: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(lo..=hi)).collect()
}

fn u(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(r, shape, -1.0, 1.0)
}

fn unary(r: &mut ChaCha8Rng, f: fn(&Tape, Var) -> Result<Var>) -> (Vec<Tensor>, Forward) {
    let s = dims(r, 3, 1, 4);
    (vec![u(r, &s)], Box::new(move |t, v| f(t, v[0])))
}

fn binary(r: &mut ChaCha8Rng, f: fn(&Tape, Var, Var) -> Result<Var>) -> (Vec<Tensor>, Forward) {
    let s = dims(r, 3, 1, 4);
    let b = if r.random_bool(0.3) { vec![1] } else { s.clone() };
    let (x, y) = (u(r, &s), u(r, &b));
    if r.random_bool(0.5) {
        (vec![x, y], Box::new(move |t, v| f(t, v[0], v[1])))
    } else {
        (vec![y, x], Box::new(move |t, v| f(t, v[0], v[1])))
    }
}

/// Random `(x, w, stride, padding)` for a conv with a non-empty output.
fn conv_geometry(r: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, usize, usize) {
    loop {
        let k = r.random_range(1..=4);
        let stride = r.random_range(1..=3);
        let pad = r.random_range(0..k);
        let (n, cin, cout) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let (h, w) = (r.random_range(2..=6), r.random_range(2..=6));
        if h + 2 * pad >= k && w + 2 * pad >= k {
            return (vec![n, cin, h, w], vec![cout, cin, k, k], stride, pad);
        }
    }
}

pub fn cases() -> Vec<Case> {
    vec![
        Case { name: "add", make: |r| binary(r, |t, a, b| t.add(a, b)) },
        Case { name: "sub", make: |r| binary(r, |t, a, b| t.sub(a, b)) },
        Case { name: "mul", make: |r| binary(r, |t, a, b| t.mul(a, b)) },
        Case {
            name: "div",
            make: |r| {
                let s = dims(r, 3, 1, 4);
                let b = if r.random_bool(0.3) { vec![1] } else { s.clone() };
                let num = u(r, &s);
                let den = away_from_zero(r, &b, 0.5, 2.0);
                (vec![num, den], Box::new(|t, v| t.div(v[0], v[1])))
            },
        },
        Case {
            name: "scale",
            make: |r| {
                let c = r.random_range(-3.0..3.0);
                let s = dims(r, 2, 1, 5);
                (vec![u(r, &s)], Box::new(move |t, v| t.scale(v[0], c)))
            },
        },
        Case {
            name: "shift",
            make: |r| {
                let c = r.random_range(-3.0..3.0);
                let s = dims(r, 2, 1, 5);
                (vec![u(r, &s)], Box::new(move |t, v| t.shift(v[0], c)))
            },
        },
        Case { name: "neg", make: |r| unary(r, |t, a| t.neg(a)) },
        Case { name: "square", make: |r| unary(r, |t, a| t.square(a)) },
        Case {
            name: "sqrt",
            make: |r| {
                let s = dims(r, 3, 1, 4);
                (vec![uniform(r, &s, 0.3, 2.0)], Box::new(|t, v| t.sqrt(v[0])))
            },
        },
        Case {
            name: "abs",
            make: |r| {
                let s = dims(r, 3, 1, 4);
                (vec![away_from_zero(r, &s, 0.05, 1.0)], Box::new(|t, v| t.abs(v[0])))
            },
        },
        Case { name: "sum", make: |r| unary(r, |t, a| t.sum(a)) },
        Case { name: "mean", make: |r| unary(r, |t, a| t.mean(a)) },
        Case {
            name: "sum_to",
            make: |r| {
                let s = dims(r, 4, 1, 3);
                let target: Vec<usize> = s.iter().map(|&d| if r.random_bool(0.5) { 1 } else { d }).collect();
                (vec![u(r, &s)], Box::new(move |t, v| t.sum_to(v[0], &target)))
            },
        },
        Case {
            name: "broadcast_to",
            make: |r| {
                let full = dims(r, 4, 1, 3);
                let small: Vec<usize> = full.iter().map(|&d| if r.random_bool(0.5) { 1 } else { d }).collect();
                (vec![u(r, &small)], Box::new(move |t, v| t.broadcast_to(v[0], &full)))
            },
        },
        Case {
            name: "broadcast_spatial",
            make: |r| {
                let (n, c) = (r.random_range(1..=2), r.random_range(1..=3));
                let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
                (vec![u(r, &[n, c, 1, 1])], Box::new(move |t, v| t.broadcast_spatial(v[0], h, w)))
            },
        },
        Case {
            name: "reshape",
            make: |r| {
                let s = dims(r, 3, 1, 4);
                let flat = vec![s.iter().product::<usize>()];
                (vec![u(r, &s)], Box::new(move |t, v| t.reshape(v[0], &flat)))
            },
        },
        Case {
            name: "concat",
            make: |r| {
                let (n, h, w) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
                let parts = r.random_range(2..=3);
                let xs: Vec<Tensor> = (0..parts)
                    .map(|_| {
                        let c = r.random_range(1..=3);
                        u(r, &[n, c, h, w])
                    })
                    .collect();
                (xs, Box::new(|t, v| t.concat(v)))
            },
        },
        Case {
            name: "slice",
            make: |r| {
                let s = dims(r, 3, 2, 4);
                let axis = r.random_range(0..3);
                let start = r.random_range(0..s[axis]);
                let len = r.random_range(1..=s[axis] - start);
                (vec![u(r, &s)], Box::new(move |t, v| t.slice(v[0], axis, start, len)))
            },
        },
        Case {
            name: "pad",
            make: |r| {
                let s = dims(r, 3, 1, 3);
                let axis = r.random_range(0..3);
                let (before, after) = (r.random_range(0..3), r.random_range(0..3));
                (vec![u(r, &s)], Box::new(move |t, v| t.pad(v[0], axis, before, after)))
            },
        },
        Case {
            name: "matmul",
            make: |r| {
                let d = dims(r, 3, 1, 4);
                (vec![u(r, &[d[0], d[1]]), u(r, &[d[1], d[2]])], Box::new(|t, v| t.matmul(v[0], v[1])))
            },
        },
        Case {
            name: "transpose",
            make: |r| {
                let d = dims(r, 2, 1, 4);
                (vec![u(r, &d)], Box::new(|t, v| t.transpose(v[0])))
            },
        },
        Case {
            name: "conv2d",
            make: |r| {
                let (xs, ws, stride, pad) = conv_geometry(r);
                let b = vec![ws[0]];
                (
                    vec![u(r, &xs), u(r, &ws), u(r, &b)],
                    Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
                )
            },
        },
        Case {
            name: "conv_transpose2d",
            make: |r| {
                let (xs, ws, stride, pad) = conv_geometry(r);
                let probe = Tape::new();
                let y = probe
                    .conv2d(probe.constant(Tensor::zeros(&xs)), probe.constant(Tensor::zeros(&ws)), None, stride, pad)
                    .unwrap();
                let ys = probe.shape(y);
                let op = (r.random_range(0..stride), r.random_range(0..stride));
                let b = vec![ws[1]];
                (
                    vec![u(r, &ys), u(r, &ws), u(r, &b)],
                    Box::new(move |t, v| t.conv_transpose2d_padded(v[0], v[1], Some(v[2]), stride, pad, op)),
                )
            },
        },
        Case {
            name: "conv2d_weight_grad",
            make: |r| {
                let (xs, ws, stride, pad) = conv_geometry(r);
                let probe = Tape::new();
                let y = probe
                    .conv2d(probe.constant(Tensor::zeros(&xs)), probe.constant(Tensor::zeros(&ws)), None, stride, pad)
                    .unwrap();
                let ys = probe.shape(y);
                let k = (ws[2], ws[3]);
                (
                    vec![u(r, &xs), u(r, &ys)],
                    Box::new(move |t, v| t.conv2d_weight_grad(v[0], v[1], k, stride, pad)),
                )
            },
        },
        Case {
            name: "leaky_relu",
            make: |r| {
                let s = dims(r, 3, 1, 4);
                (vec![away_from_zero(r, &s, 0.05, 1.0)], Box::new(|t, v| t.leaky_relu(v[0], 0.2)))
            },
        },
        Case {
            name: "relu",
            make: |r| {
                let s = dims(r, 3, 1, 4);
                (vec![away_from_zero(r, &s, 0.05, 1.0)], Box::new(|t, v| t.relu(v[0])))
            },
        },
        Case { name: "tanh", make: |r| unary(r, |t, a| t.tanh(a)) },
        Case {
            name: "l2_norm_per_sample",
            make: |r| {
                let s = dims(r, 3, 1, 4);
                (vec![away_from_zero(r, &s, 0.1, 1.0)], Box::new(|t, v| t.l2_norm_per_sample(v[0])))
            },
        },
        Case {
            name: "nn::conv2d",
            make: |r| {
                let (xs, ws, stride, pad) = conv_geometry(r);
                let b = vec![ws[0]];
                (
                    vec![u(r, &xs), u(r, &ws), u(r, &b)],
                    Box::new(move |t, v| {
                        let p = Conv2dParams { weight: v[1], bias: v[2], stride, padding: pad };
                        nn::conv2d(t, v[0], &p)
                    }),
                )
            },
        },
        Case {
            name: "nn::conv_transpose2d",
            make: |r| {
                let (n, cin, cout) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
                let h = r.random_range(1..=4);
                (
                    vec![u(r, &[n, cin, h, h]), u(r, &[cin, cout, 4, 4]), u(r, &[cout])],
                    Box::new(|t, v| {
                        let p = Conv2dParams { weight: v[1], bias: v[2], stride: 2, padding: 1 };
                        nn::conv_transpose2d(t, v[0], &p)
                    }),
                )
            },
        },
        Case {
            name: "nn::instance_norm",
            make: |r| {
                let (n, c) = (r.random_range(1..=2), r.random_range(1..=3));
                let (h, w) = (r.random_range(2..=4), r.random_range(2..=4));
                (
                    vec![u(r, &[n, c, h, w]), uniform(r, &[c], 0.5, 1.5), u(r, &[c])],
                    Box::new(|t, v| nn::instance_norm(t, v[0], v[1], v[2], nn::NORM_EPS)),
                )
            },
        },
        Case {
            name: "nn::spatial_mean",
            make: |r| {
                let s = dims(r, 4, 1, 4);
                (vec![u(r, &s)], Box::new(|t, v| nn::spatial_mean(t, v[0])))
            },
        },
        Case {
            name: "nn::residual_block",
            make: |r| {
                let c = r.random_range(1..=3);
                let h = r.random_range(2..=4);
                let mut inputs = vec![u(r, &[1, c, h, h])];
                for _ in 0..2 {
                    inputs.push(uniform(r, &[c, c, 3, 3], -0.5, 0.5));
                    inputs.push(u(r, &[c]));
                    inputs.push(uniform(r, &[c], 0.5, 1.5));
                    inputs.push(u(r, &[c]));
                }
                (
                    inputs,
                    Box::new(|t, v| {
                        let conv = |w, b| Conv2dParams { weight: w, bias: b, stride: 1, padding: 1 };
                        let norm = |g, s| nn::NormParams { gain: g, shift: s };
                        let p = ResidualBlockParams {
                            conv1: conv(v[1], v[2]),
                            norm1: Some(norm(v[3], v[4])),
                            conv2: conv(v[5], v[6]),
                            norm2: Some(norm(v[7], v[8])),
                        };
                        nn::residual_block(t, v[0], &p)
                    }),
                )
            },
        },
        Case {
            name: "nn::fuse_global",
            make: |r| {
                let (n, ci, cg) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
                let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
                (
                    vec![u(r, &[n, ci, h, w]), u(r, &[n, cg, 1, 1]), u(r, &[ci, cg, 1, 1]), u(r, &[ci])],
                    Box::new(|t, v| {
                        let unit = FusionUnit {
                            proj: Conv2dParams { weight: v[2], bias: v[3], stride: 1, padding: 0 },
                        };
                        nn::fuse_global(t, v[0], v[1], &unit)
                    }),
                )
            },
        },
    ]
}

/// Worst relative error of `case` over `INSTANCES` random instances.
pub fn run_case(case: &Case, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES as u64 {
        let mut r = rng(seed.wrapping_mul(1000).wrapping_add(i));
        let (inputs, f) = (case.make)(&mut r);
        worst = worst.max(grad_check(&inputs, f, seed ^ (i << 8), 24));
    }
    worst
}
