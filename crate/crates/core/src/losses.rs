//! Critic and generator objectives: conditional WGAN-GP with gradient
//! penalty, L1 reconstruction, and plain MSE.
//!
//! The critic minimizes `mean D(x, g) - mean D(x, y) + lambda * GP`; the
//! generator minimizes `-mean D(x, G(x)) + lambda_l1 * L1`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::Discriminator;
use crate::params::Bound;
use crate::tensor::Tensor;

/// Weights of the penalty and reconstruction terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_gp: f32,
    pub lambda_l1: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_gp: 10.0,
            lambda_l1: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_gp >= 0.0 && self.lambda_l1 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got lambda_gp={} lambda_l1={}",
                self.lambda_gp, self.lambda_l1
            )));
        }
        Ok(())
    }
}

/// Anything that maps a `(condition, candidate)` pair to a patch score map
/// of shape `(N, 1, h, w)`.
pub trait Critic {
    fn patch_scores(&self, tape: &Tape, x: Var, candidate: Var) -> Result<Var>;
}

/// A discriminator together with parameters bound on the same tape.
pub struct BoundCritic<'a> {
    pub model: &'a Discriminator,
    pub params: &'a Bound,
}

impl Critic for BoundCritic<'_> {
    fn patch_scores(&self, tape: &Tape, x: Var, candidate: Var) -> Result<Var> {
        self.model.forward(tape, self.params, x, candidate)
    }
}

/// Sum over the batch of each sample's mean patch score.
fn per_sample_mean_sum(tape: &Tape, map: Var) -> Result<Var> {
    let s = tape.shape(map);
    let per_sample = s.iter().skip(1).product::<usize>().max(1);
    tape.scale(tape.sum(map)?, 1.0 / per_sample as f32)
}

fn check_same(op: &'static str, tape: &Tape, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::shape(op, &sa, &sb));
    }
    Ok(())
}

/// `mean_n (||grad_xhat D(x, xhat)||_2 - 1)^2` with `xhat = e*y + (1-e)*g`
/// per sample. The gradient is built with `create_graph`, so the result is
/// differentiable in the critic's parameters.
pub fn gradient_penalty(tape: &Tape, critic: &dyn Critic, x: Var, y: Var, g: Var, eps: &[f32]) -> Result<Var> {
    check_same("gradient_penalty", tape, x, y)?;
    check_same("gradient_penalty", tape, y, g)?;
    let shape = tape.shape(y);
    let n = shape.first().copied().unwrap_or(0);
    if eps.len() != n || n == 0 {
        return Err(Error::invalid(
            "gradient_penalty",
            format!("need one eps per sample ({n}), got {}", eps.len()),
        ));
    }
    if let Some(e) = eps.iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::invalid("gradient_penalty", format!("eps {e} outside [0, 1]")));
    }
    let (yv, gv) = (tape.value(y), tape.value(g));
    let inner = yv.numel() / n;
    let mixed: Vec<f32> = yv
        .data()
        .iter()
        .zip(gv.data())
        .enumerate()
        .map(|(i, (&a, &b))| {
            let e = eps[i / inner];
            e * a + (1.0 - e) * b
        })
        .collect();
    let xhat = tape.param(Tensor::new(shape, mixed)?);
    let score = per_sample_mean_sum(tape, critic.patch_scores(tape, x, xhat)?)?;
    let grad = tape.grad(score, &[xhat], true)?[0];
    let norm = tape.l2_norm_per_sample(grad)?;
    tape.mean(tape.square(tape.shift(norm, -1.0)?)?)
}

/// Terms of the critic objective; `total` is the minimized quantity.
#[derive(Clone, Copy, Debug)]
pub struct CriticLoss {
    pub total: Var,
    pub real: Var,
    pub fake: Var,
    pub penalty: Var,
}

/// Critic objective. `g` is detached here, so this never reaches the
/// generator's parameters.
pub fn critic_loss(
    tape: &Tape,
    critic: &dyn Critic,
    x: Var,
    y: Var,
    g: Var,
    eps: &[f32],
    weights: &LossWeights,
) -> Result<CriticLoss> {
    let g = tape.detach(g)?;
    let real = tape.mean(critic.patch_scores(tape, x, y)?)?;
    let fake = tape.mean(critic.patch_scores(tape, x, g)?)?;
    let penalty = gradient_penalty(tape, critic, x, y, g, eps)?;
    let total = tape.add(tape.sub(fake, real)?, tape.scale(penalty, weights.lambda_gp)?)?;
    Ok(CriticLoss {
        total,
        real,
        fake,
        penalty,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: Var,
    pub adv: Var,
    pub l1: Var,
}

/// Generator objective for an already computed `gx = G(x)`.
pub fn generator_loss(
    tape: &Tape,
    critic: &dyn Critic,
    x: Var,
    y: Var,
    gx: Var,
    weights: &LossWeights,
) -> Result<GeneratorLoss> {
    let l1 = l1_loss(tape, gx, y)?;
    let adv = tape.neg(tape.mean(critic.patch_scores(tape, x, gx)?)?)?;
    let total = tape.add(adv, tape.scale(l1, weights.lambda_l1)?)?;
    Ok(GeneratorLoss { total, adv, l1 })
}

/// Mean absolute difference over all elements.
pub fn l1_loss(tape: &Tape, pred: Var, target: Var) -> Result<Var> {
    check_same("l1_loss", tape, pred, target)?;
    tape.mean(tape.abs(tape.sub(target, pred)?)?)
}

/// Mean squared difference over all elements.
pub fn mse_loss(tape: &Tape, pred: Var, target: Var) -> Result<Var> {
    check_same("mse_loss", tape, pred, target)?;
    tape.mean(tape.square(tape.sub(pred, target)?)?)
}
