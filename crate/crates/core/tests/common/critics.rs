//! Small critics for exercising the gradient penalty.

use mlfcgan::autodiff::{Tape, Var};
use mlfcgan::losses::{gradient_penalty, Critic};
use mlfcgan::Result;
use mlfcgan::Tensor;
use rand_chacha::ChaCha8Rng;

use super::{norm64, rel_err, uniform, FD_STEP};

/// `D(x, v) = <w, v>` as a single patch, ignoring the condition.
pub struct Linear {
    pub w: Var,
}

impl Critic for Linear {
    fn patch_scores(&self, tape: &Tape, _x: Var, v: Var) -> Result<Var> {
        tape.conv2d(v, self.w, None, 1, 0)
    }
}

/// `conv3x3(6 -> hidden) -> tanh -> conv3x3 stride 2 (hidden -> 1)` on the
/// concatenated pair.
pub struct TwoLayer {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Critic for TwoLayer {
    fn patch_scores(&self, tape: &Tape, x: Var, v: Var) -> Result<Var> {
        let h = tape.concat(&[x, v])?;
        let h = tape.tanh(tape.conv2d(h, self.w1, Some(self.b1), 1, 1)?)?;
        tape.conv2d(h, self.w2, Some(self.b2), 2, 1)
    }
}

pub const HIDDEN: usize = 4;

pub fn two_layer_params(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        uniform(r, &[HIDDEN, 6, 3, 3], -0.4, 0.4),
        uniform(r, &[HIDDEN], -0.2, 0.2),
        uniform(r, &[1, HIDDEN, 3, 3], -0.4, 0.4),
        uniform(r, &[1], -0.2, 0.2),
    ]
}

fn penalty_value(params: &[Tensor], x: &Tensor, y: &Tensor, g: &Tensor, eps: &[f32]) -> f64 {
    let tape = Tape::new();
    let p: Vec<Var> = params.iter().map(|t| tape.constant(t.clone())).collect();
    let critic = TwoLayer { w1: p[0], b1: p[1], w2: p[2], b2: p[3] };
    let (x, y, g) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(g.clone()));
    tape.item(gradient_penalty(&tape, &critic, x, y, g, eps).unwrap()).unwrap() as f64
}

/// Relative error between the double-backprop parameter gradient of the
/// penalty and central differences over every parameter, for a random
/// two-layer critic on `(2, 6, 4, 4)` pairs (3 + 3 channels).
pub fn penalty_param_grad_error(r: &mut ChaCha8Rng) -> f64 {
    let params = two_layer_params(r);
    let x = uniform(r, &[2, 3, 4, 4], -1.0, 1.0);
    let y = uniform(r, &[2, 3, 4, 4], -1.0, 1.0);
    let g = uniform(r, &[2, 3, 4, 4], -1.0, 1.0);
    let eps = [0.3f32, 0.8];

    let tape = Tape::new();
    let p: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let critic = TwoLayer { w1: p[0], b1: p[1], w2: p[2], b2: p[3] };
    let (xv, yv, gv) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(g.clone()));
    let gp = gradient_penalty(&tape, &critic, xv, yv, gv, &eps).unwrap();
    let grads = tape.grad(gp, &p, false).unwrap();

    let mut analytic = Vec::new();
    let mut fd = Vec::new();
    for k in 0..params.len() {
        let gk = tape.value(grads[k]);
        for i in 0..params[k].numel() {
            let mut plus = params.clone();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = params.clone();
            minus[k].data_mut()[i] -= FD_STEP;
            let h = (plus[k].data()[i] as f64 - minus[k].data()[i] as f64) / 2.0;
            fd.push((penalty_value(&plus, &x, &y, &g, &eps) - penalty_value(&minus, &x, &y, &g, &eps)) / (2.0 * h));
            analytic.push(gk.data()[i] as f64);
        }
    }
    assert!(norm64(&analytic) > 1e-3, "degenerate critic: penalty gradient vanished");
    rel_err(&analytic, &fd)
}
