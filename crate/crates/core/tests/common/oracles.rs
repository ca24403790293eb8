//! Independent reference implementations: nested-loop convolution, direct
//! 2-D windowed SSIM, PSNR from its definition, and fusion-unit checks.

use mlfcgan::autodiff::Tape;
use mlfcgan::nn::{self, Conv2dParams, FusionUnit};
use mlfcgan::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::uniform;

/// Direct convolution with zero padding, summing in (ci, ky, kx) order.
pub fn naive_conv(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let yy = (i * stride + ky) as isize - pad as isize;
                                let xx = (j * stride + kx) as isize - pad as isize;
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                    acc += x.at4(b, c, yy as usize, xx as usize) * w.at4(o, c, ky, kx);
                                }
                            }
                        }
                    }
                    let idx = out.index4(b, o, i, j);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

pub fn psnr_reference(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel() as f64;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum();
    20.0 * (1.0 / (sse / n).sqrt()).log10()
}

/// SSIM with an explicit 2-D Gaussian at every window position.
pub fn ssim_reference(a: &Tensor, b: &Tensor) -> f64 {
    const K: usize = 11;
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut win = [[0.0f64; K]; K];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut per_channel = 0.0;
    for ch in 0..c {
        let at = |t: &Tensor, y: usize, x: usize| t.data()[ch * h * w + y * w + x] as f64;
        let mut sum = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - K {
            for x0 in 0..=w - K {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..K {
                    for j in 0..K {
                        let g = win[i][j] / total;
                        mx += g * at(a, y0 + i, x0 + j);
                        my += g * at(b, y0 + i, x0 + j);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..K {
                    for j in 0..K {
                        let g = win[i][j] / total;
                        let dx = at(a, y0 + i, x0 + j) - mx;
                        let dy = at(b, y0 + i, x0 + j) - my;
                        vx += g * dx * dx;
                        vy += g * dy * dy;
                        cov += g * dx * dy;
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        per_channel += sum / count as f64;
    }
    per_channel / c as f64
}

/// One random fusion configuration; returns a description of the first
/// violated invariant, if any.
pub fn check_fusion(r: &mut ChaCha8Rng) -> Result<(), String> {
    let n = r.random_range(1..=3);
    let ci = r.random_range(1..=8);
    let cg = r.random_range(1..=8);
    let (h, w) = (r.random_range(1..=9), r.random_range(1..=9));
    let local = uniform(r, &[n, ci, h, w], -3.0, 3.0);
    let global = uniform(r, &[n, cg, 1, 1], -3.0, 3.0);
    let weight = uniform(r, &[ci, cg, 1, 1], -1.0, 1.0);
    let bias = uniform(r, &[ci], -1.0, 1.0);

    let tape = Tape::new();
    let unit = FusionUnit {
        proj: Conv2dParams {
            weight: tape.constant(weight.clone()),
            bias: tape.constant(bias.clone()),
            stride: 1,
            padding: 0,
        },
    };
    let out = nn::fuse_global(&tape, tape.constant(local.clone()), tape.constant(global.clone()), &unit)
        .map_err(|e| e.to_string())?;
    let out = tape.value(out);
    let cfg = format!("n={n} ci={ci} cg={cg} h={h} w={w}");
    if out.shape() != [n, 2 * ci, h, w] {
        return Err(format!("{cfg}: shape {:?}", out.shape()));
    }
    for b in 0..n {
        for c in 0..ci {
            for y in 0..h {
                for x in 0..w {
                    if out.at4(b, c, y, x).to_bits() != local.at4(b, c, y, x).to_bits() {
                        return Err(format!("{cfg}: local channel {c} altered at ({y}, {x})"));
                    }
                }
            }
        }
        for c in 0..ci {
            let first = out.at4(b, ci + c, 0, 0);
            for y in 0..h {
                for x in 0..w {
                    if out.at4(b, ci + c, y, x).to_bits() != first.to_bits() {
                        return Err(format!("{cfg}: appended channel {c} varies spatially"));
                    }
                }
            }
            let expect: f64 = bias.data()[c] as f64
                + (0..cg)
                    .map(|k| weight.at4(c, k, 0, 0) as f64 * global.at4(b, k, 0, 0) as f64)
                    .sum::<f64>();
            if (first as f64 - expect).abs() > 1e-5 * expect.abs().max(1.0) {
                return Err(format!("{cfg}: appended value {first} vs {expect}"));
            }
        }
    }
    Ok(())
}

/// The hand-computed example: global (1, 2), projection weights (3, 4), zero
/// bias, so the single appended channel is 3 + 8 = 11 everywhere.
pub fn fusion_hand_example() -> bool {
    let tape = Tape::new();
    let local = Tensor::from_fn(&[1, 1, 2, 3], |i| i as f32);
    let unit = FusionUnit {
        proj: Conv2dParams {
            weight: tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![3.0, 4.0]).unwrap()),
            bias: tape.constant(Tensor::zeros(&[1])),
            stride: 1,
            padding: 0,
        },
    };
    let global = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 2.0]).unwrap());
    let out = nn::fuse_global(&tape, tape.constant(local.clone()), global, &unit).unwrap();
    let out = tape.value(out);
    out.shape() == [1, 2, 2, 3]
        && out.data()[..6] == local.data()[..]
        && out.data()[6..].iter().all(|&v| v == 11.0)
}
