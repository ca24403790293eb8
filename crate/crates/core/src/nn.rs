//! Layers built from tape primitives: convolutions, instance norm, residual
//! block, and the global/local feature fusion unit.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::Bound;

/// Negative slope of the leaky ReLU used in the encoder and the critic.
pub const LEAKY_SLOPE: f32 = 0.2;

/// Added to the variance inside the square root of instance norm.
pub const NORM_EPS: f32 = 1e-5;

/// A bound convolution: weight, bias and geometry.
///
/// For [`conv2d`] the weight is `(C_out, C_in, K, K)`; for
/// [`conv_transpose2d`] the same layout is read as the adjoint map, so the
/// weight is `(C_in, C_out, K, K)` of the transposed layer.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dParams {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    /// Looks up `{prefix}.weight` and `{prefix}.bias`.
    pub fn bind(params: &Bound, prefix: &str, stride: usize, padding: usize) -> Result<Self> {
        Ok(Conv2dParams {
            weight: params.get(&format!("{prefix}.weight"))?,
            bias: params.get(&format!("{prefix}.bias"))?,
            stride,
            padding,
        })
    }
}

/// Per-channel affine parameters applied after normalization.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: Var,
    pub shift: Var,
}

impl NormParams {
    pub fn bind(params: &Bound, prefix: &str) -> Result<Self> {
        Ok(NormParams {
            gain: params.get(&format!("{prefix}.gain"))?,
            shift: params.get(&format!("{prefix}.shift"))?,
        })
    }
}

pub fn conv2d(tape: &Tape, x: Var, p: &Conv2dParams) -> Result<Var> {
    let (xs, ws) = (tape.shape(x), tape.shape(p.weight));
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(Error::shape("conv2d", &xs, &ws));
    }
    tape.conv2d(x, p.weight, Some(p.bias), p.stride, p.padding)
}

pub fn conv_transpose2d(tape: &Tape, x: Var, p: &Conv2dParams) -> Result<Var> {
    let (xs, ws) = (tape.shape(x), tape.shape(p.weight));
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
        return Err(Error::shape("conv_transpose2d", &xs, &ws));
    }
    tape.conv_transpose2d(x, p.weight, Some(p.bias), p.stride, p.padding)
}

pub fn leaky_relu(tape: &Tape, x: Var, slope: f32) -> Result<Var> {
    tape.leaky_relu(x, slope)
}

pub fn relu(tape: &Tape, x: Var) -> Result<Var> {
    tape.relu(x)
}

pub fn tanh(tape: &Tape, x: Var) -> Result<Var> {
    tape.tanh(x)
}

/// Mean over the spatial axes, `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn spatial_mean(tape: &Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 4 {
        return Err(Error::invalid("spatial_mean", format!("expected 4-D input, got {s:?}")));
    }
    let sum = tape.sum_to(x, &[s[0], s[1], 1, 1])?;
    tape.scale(sum, 1.0 / (s[2] * s[3]) as f32)
}

/// Normalizes each `(n, c)` plane to zero mean and unit variance, then
/// applies the per-channel `gain` and `shift`.
pub fn instance_norm(tape: &Tape, x: Var, gain: Var, shift: Var, eps: f32) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 4 {
        return Err(Error::invalid("instance_norm", format!("expected 4-D input, got {s:?}")));
    }
    let (c, hw) = (s[1], s[2] * s[3]);
    if hw < 2 {
        return Err(Error::invalid(
            "instance_norm",
            format!("needs at least 2 spatial positions, got {}x{}", s[2], s[3]),
        ));
    }
    for v in [gain, shift] {
        if tape.shape(v) != [c] {
            return Err(Error::shape("instance_norm", &tape.shape(v), &[c]));
        }
    }
    let mu = tape.broadcast_to(spatial_mean(tape, x)?, &s)?;
    let centered = tape.sub(x, mu)?;
    let var = spatial_mean(tape, tape.square(centered)?)?;
    let std = tape.sqrt(tape.shift(var, eps)?)?;
    let normed = tape.div(centered, tape.broadcast_to(std, &s)?)?;
    let per_channel = |v: Var| -> Result<Var> { tape.broadcast_to(tape.reshape(v, &[1, c, 1, 1])?, &s) };
    let scaled = tape.mul(normed, per_channel(gain)?)?;
    tape.add(scaled, per_channel(shift)?)
}

/// Two 3x3 convolutions with an identity shortcut: `x + F(x)`.
///
/// Norms are optional so the block also works on 1x1 feature maps.
#[derive(Clone, Copy, Debug)]
pub struct ResidualBlockParams {
    pub conv1: Conv2dParams,
    pub norm1: Option<NormParams>,
    pub conv2: Conv2dParams,
    pub norm2: Option<NormParams>,
}

impl ResidualBlockParams {
    pub fn bind(params: &Bound, prefix: &str) -> Result<Self> {
        let norm = |n: &str| -> Result<Option<NormParams>> {
            let name = format!("{prefix}.{n}");
            if params.has(&format!("{name}.gain")) {
                NormParams::bind(params, &name).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(ResidualBlockParams {
            conv1: Conv2dParams::bind(params, &format!("{prefix}.conv1"), 1, 1)?,
            norm1: norm("norm1")?,
            conv2: Conv2dParams::bind(params, &format!("{prefix}.conv2"), 1, 1)?,
            norm2: norm("norm2")?,
        })
    }
}

pub fn residual_block(tape: &Tape, x: Var, p: &ResidualBlockParams) -> Result<Var> {
    let mut h = conv2d(tape, x, &p.conv1)?;
    if let Some(n) = p.norm1 {
        h = instance_norm(tape, h, n.gain, n.shift, NORM_EPS)?;
    }
    h = leaky_relu(tape, h, LEAKY_SLOPE)?;
    h = conv2d(tape, h, &p.conv2)?;
    if let Some(n) = p.norm2 {
        h = instance_norm(tape, h, n.gain, n.shift, NORM_EPS)?;
    }
    let (xs, hs) = (tape.shape(x), tape.shape(h));
    if xs != hs {
        return Err(Error::shape("residual_block", &xs, &hs));
    }
    tape.add(x, h)
}

/// The 1x1 projection that matches global features to one local scale.
#[derive(Clone, Copy, Debug)]
pub struct FusionUnit {
    pub proj: Conv2dParams,
}

impl FusionUnit {
    pub fn bind(params: &Bound, prefix: &str) -> Result<Self> {
        Ok(FusionUnit {
            proj: Conv2dParams::bind(params, &format!("{prefix}.proj"), 1, 0)?,
        })
    }
}

/// Augments a local feature map with global context.
///
/// The `(N, c_g, 1, 1)` global feature is projected to `c_i` channels by a
/// 1x1 convolution, copied to every one of the `h_i * w_i` positions, and
/// concatenated after the local channels, giving `(N, 2 c_i, h_i, w_i)`.
pub fn fuse_global(tape: &Tape, local: Var, global: Var, unit: &FusionUnit) -> Result<Var> {
    let ls = tape.shape(local);
    let gs = tape.shape(global);
    if ls.len() != 4 || gs.len() != 4 || gs[0] != ls[0] {
        return Err(Error::shape("fuse_global", &ls, &gs));
    }
    if gs[2] != 1 || gs[3] != 1 {
        return Err(Error::invalid(
            "fuse_global",
            format!("global features must be 1x1, got {}x{}", gs[2], gs[3]),
        ));
    }
    let ws = tape.shape(unit.proj.weight);
    if ws[0] != ls[1] || ws[2] != 1 || ws[3] != 1 || unit.proj.stride != 1 {
        return Err(Error::invalid(
            "fuse_global",
            format!(
                "projection {:?} does not map {} global channels onto {} local channels with a 1x1 kernel",
                ws, gs[1], ls[1]
            ),
        ));
    }
    let projected = conv2d(tape, global, &unit.proj)?;
    let tiled = tape.broadcast_spatial(projected, ls[2], ls[3])?;
    tape.concat(&[local, tiled])
}
