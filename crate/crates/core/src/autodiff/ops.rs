use std::fmt;

use super::kernels;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A recorded primitive together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    /// Multiplication by a constant.
    Scale(f32),
    /// Addition of a constant.
    Shift(f32),
    Square,
    Sqrt,
    Abs,
    Sum,
    Mean,
    SumTo(Vec<usize>),
    BroadcastTo(Vec<usize>),
    BroadcastSpatial { height: usize, width: usize },
    Reshape(Vec<usize>),
    /// Concatenation along axis 1.
    Concat,
    Slice { axis: usize, start: usize, len: usize },
    /// Zero padding along one axis.
    Pad { axis: usize, before: usize, after: usize },
    Matmul,
    Transpose,
    Conv2d { stride: usize, padding: usize },
    ConvTranspose2d {
        stride: usize,
        padding: usize,
        output_padding: (usize, usize),
    },
    Conv2dWeightGrad {
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    },
    LeakyRelu(f32),
    Relu,
    Tanh,
    L2NormPerSample,
}

/// Optional attributes for [`Op::from_name`].
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub scalar: Option<f32>,
    pub shape: Option<Vec<usize>>,
    pub axis: Option<usize>,
    pub start: Option<usize>,
    pub len: Option<usize>,
    pub before: Option<usize>,
    pub after: Option<usize>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub output_padding: Option<(usize, usize)>,
    pub kernel: Option<(usize, usize)>,
    pub height: Option<usize>,
    pub width: Option<usize>,
}

fn need<T>(v: Option<T>, prim: &str, attr: &str) -> Result<T> {
    v.ok_or_else(|| Error::InvalidArgument {
        op: "record",
        msg: format!("`{prim}` requires attribute `{attr}`"),
    })
}

impl Op {
    /// Looks up a primitive by name and fills in its attributes.
    pub fn from_name(name: &str, a: &Attrs) -> Result<Op> {
        let op = match name {
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "scale" => Op::Scale(need(a.scalar, name, "scalar")?),
            "shift" => Op::Shift(need(a.scalar, name, "scalar")?),
            "square" => Op::Square,
            "sqrt" => Op::Sqrt,
            "abs" => Op::Abs,
            "sum" => Op::Sum,
            "mean" => Op::Mean,
            "sum_to" => Op::SumTo(need(a.shape.clone(), name, "shape")?),
            "broadcast_to" => Op::BroadcastTo(need(a.shape.clone(), name, "shape")?),
            "broadcast_spatial" => Op::BroadcastSpatial {
                height: need(a.height, name, "height")?,
                width: need(a.width, name, "width")?,
            },
            "reshape" => Op::Reshape(need(a.shape.clone(), name, "shape")?),
            "concat" => Op::Concat,
            "slice" => Op::Slice {
                axis: a.axis.unwrap_or(1),
                start: need(a.start, name, "start")?,
                len: need(a.len, name, "len")?,
            },
            "pad" => Op::Pad {
                axis: a.axis.unwrap_or(1),
                before: a.before.unwrap_or(0),
                after: a.after.unwrap_or(0),
            },
            "matmul" => Op::Matmul,
            "transpose" => Op::Transpose,
            "conv2d" => Op::Conv2d {
                stride: a.stride.unwrap_or(1),
                padding: a.padding.unwrap_or(0),
            },
            "conv_transpose2d" => Op::ConvTranspose2d {
                stride: a.stride.unwrap_or(1),
                padding: a.padding.unwrap_or(0),
                output_padding: a.output_padding.unwrap_or((0, 0)),
            },
            "conv2d_weight_grad" => Op::Conv2dWeightGrad {
                kernel: need(a.kernel, name, "kernel")?,
                stride: a.stride.unwrap_or(1),
                padding: a.padding.unwrap_or(0),
            },
            "leaky_relu" => Op::LeakyRelu(a.scalar.unwrap_or(0.2)),
            "relu" => Op::Relu,
            "tanh" => Op::Tanh,
            "l2_norm_per_sample" => Op::L2NormPerSample,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        };
        Ok(op)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::Shift(_) => "shift",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Abs => "abs",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumTo(_) => "sum_to",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::BroadcastSpatial { .. } => "broadcast_spatial",
            Op::Reshape(_) => "reshape",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::L2NormPerSample => "l2_norm_per_sample",
        }
    }

    fn arity(&self) -> Option<std::ops::RangeInclusive<usize>> {
        Some(match self {
            Op::Leaf => 0..=0,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Matmul => 2..=2,
            Op::Conv2d { .. } | Op::ConvTranspose2d { .. } => 2..=3,
            Op::Conv2dWeightGrad { .. } => 2..=2,
            Op::Concat => return None,
            _ => 1..=1,
        })
    }

    /// Computes the op's output from input values.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        match self.arity() {
            Some(r) if !r.contains(&inputs.len()) => {
                return Err(Error::invalid(
                    self.name(),
                    format!("expected {r:?} inputs, got {}", inputs.len()),
                ))
            }
            None if inputs.is_empty() => return Err(Error::invalid(self.name(), "no inputs")),
            _ => {}
        }
        let x = inputs.first().copied();
        let a = || x.expect("arity checked");
        Ok(match self {
            Op::Leaf => return Err(Error::invalid("leaf", "leaves have no forward rule")),
            Op::Add => kernels::binary("add", a(), inputs[1], |p, q| p + q)?,
            Op::Sub => kernels::binary("sub", a(), inputs[1], |p, q| p - q)?,
            Op::Mul => kernels::binary("mul", a(), inputs[1], |p, q| p * q)?,
            Op::Div => kernels::binary("div", a(), inputs[1], |p, q| p / q)?,
            Op::Scale(c) => kernels::unary(a(), |v| v * c),
            Op::Shift(c) => kernels::unary(a(), |v| v + c),
            Op::Square => kernels::unary(a(), |v| v * v),
            Op::Sqrt => kernels::unary(a(), f32::sqrt),
            Op::Abs => kernels::unary(a(), f32::abs),
            Op::Sum => kernels::sum_all(a()),
            Op::Mean => kernels::mean_all(a())?,
            Op::SumTo(s) => kernels::sum_to(a(), s)?,
            Op::BroadcastTo(s) => kernels::broadcast_to(a(), s)?,
            Op::BroadcastSpatial { height, width } => {
                kernels::broadcast_spatial(a(), *height, *width)?
            }
            Op::Reshape(s) => kernels::reshape(a(), s)?,
            Op::Concat => kernels::concat(inputs)?,
            Op::Slice { axis, start, len } => kernels::slice(a(), *axis, *start, *len)?,
            Op::Pad {
                axis,
                before,
                after,
            } => kernels::pad(a(), *axis, *before, *after)?,
            Op::Matmul => kernels::matmul(a(), inputs[1])?,
            Op::Transpose => kernels::transpose(a())?,
            Op::Conv2d { stride, padding } => {
                kernels::conv2d(a(), inputs[1], inputs.get(2).copied(), *stride, *padding)?
            }
            Op::ConvTranspose2d {
                stride,
                padding,
                output_padding,
            } => kernels::conv_transpose2d(
                a(),
                inputs[1],
                inputs.get(2).copied(),
                *stride,
                *padding,
                *output_padding,
            )?,
            Op::Conv2dWeightGrad {
                kernel,
                stride,
                padding,
            } => kernels::conv2d_weight_grad(a(), inputs[1], *kernel, *stride, *padding)?,
            Op::LeakyRelu(s) => kernels::leaky_relu(a(), *s),
            Op::Relu => kernels::leaky_relu(a(), 0.0),
            Op::Tanh => kernels::unary(a(), f32::tanh),
            Op::L2NormPerSample => kernels::l2_norm_per_sample(a())?,
        })
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
