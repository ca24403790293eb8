use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::ops::{Attrs, Op};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    /// Position of the node on its tape.
    pub fn id(&self) -> usize {
        self.id
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by leaf node.
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Var> {
        self.by_node.get(&v.id).copied()
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }

    /// Node ids that received a gradient, ascending.
    pub fn node_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.by_node.keys().copied().collect();
        ids.sort_unstable();
        ids
    }
}

/// A single-threaded record of primitive applications.
///
/// Every op is appended in execution order, so node inputs always precede the
/// node. Gradient rules are themselves expressed as recorded primitives, which
/// makes `backward(.., create_graph = true)` results differentiable again.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    grad_enabled: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

struct GradModeGuard<'a> {
    cell: &'a Cell<bool>,
    prev: bool,
}

impl Drop for GradModeGuard<'_> {
    fn drop(&mut self) {
        self.cell.set(self.prev);
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            grad_enabled: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, inputs: Vec<usize>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            inputs,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            tape: self.id,
        }
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, Vec::new(), requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant sharing `v`'s value but cut from its history.
    pub fn detach(&self, v: Var) -> Result<Var> {
        self.check(v)?;
        let value = self.nodes.borrow()[v.id].value.clone();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad: false,
        });
        Ok(Var {
            id: nodes.len() - 1,
            tape: self.id,
        })
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.len() {
            Err(Error::NotOnTape)
        } else {
            Ok(())
        }
    }

    /// The value of `v`.
    ///
    /// Panics if `v` was recorded on a different tape.
    pub fn value(&self, v: Var) -> Rc<Tensor> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<f32> {
        self.check(v)?;
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        v.tape == self.id && self.nodes.borrow()[v.id].requires_grad
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled.get()
    }

    /// Runs `f` with recording of gradient history switched off.
    pub fn no_grad<R>(&self, f: impl FnOnce() -> R) -> R {
        let _guard = self.set_grad_mode(false);
        f()
    }

    fn set_grad_mode(&self, enabled: bool) -> GradModeGuard<'_> {
        let prev = self.grad_enabled.replace(enabled);
        GradModeGuard {
            cell: &self.grad_enabled,
            prev,
        }
    }

    /// Applies `op` to `inputs`, appending the result to the tape.
    pub fn record(&self, op: Op, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let (values, any_grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<Rc<Tensor>> = inputs.iter().map(|v| nodes[v.id].value.clone()).collect();
            let any_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
            (values, any_grad)
        };
        let refs: Vec<&Tensor> = values.iter().map(|t| t.as_ref()).collect();
        let out = op.forward(&refs)?;
        let requires_grad = any_grad && self.grad_enabled.get();
        Ok(self.push(out, op, inputs.iter().map(|v| v.id).collect(), requires_grad))
    }

    /// [`Tape::record`] by primitive name, e.g. `"conv2d"` or `"concat"`.
    pub fn record_named(&self, name: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        self.record(Op::from_name(name, attrs)?, inputs)
    }

    /// Recomputes every non-leaf node from its recorded inputs and reports
    /// whether all outputs match bit for bit.
    pub fn replay(&self) -> Result<bool> {
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            if node.op == Op::Leaf {
                continue;
            }
            let refs: Vec<&Tensor> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            if !node.op.forward(&refs)?.bit_eq(&node.value) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add, &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub, &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul, &[a, b])
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Div, &[a, b])
    }

    pub fn scale(&self, a: Var, c: f32) -> Result<Var> {
        self.record(Op::Scale(c), &[a])
    }

    pub fn shift(&self, a: Var, c: f32) -> Result<Var> {
        self.record(Op::Shift(c), &[a])
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn square(&self, a: Var) -> Result<Var> {
        self.record(Op::Square, &[a])
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.record(Op::Sqrt, &[a])
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.record(Op::Abs, &[a])
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        self.record(Op::Sum, &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        self.record(Op::Mean, &[a])
    }

    pub fn sum_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::SumTo(shape.to_vec()), &[a])
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::BroadcastTo(shape.to_vec()), &[a])
    }

    /// Copies a `(N, C, 1, 1)` tensor over a `height x width` grid.
    pub fn broadcast_spatial(&self, g: Var, height: usize, width: usize) -> Result<Var> {
        self.record(Op::BroadcastSpatial { height, width }, &[g])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(shape.to_vec()), &[a])
    }

    /// Concatenates along axis 1.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        self.record(Op::Concat, parts)
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.record(Op::Slice { axis, start, len }, &[a])
    }

    pub fn pad(&self, a: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        self.record(
            Op::Pad {
                axis,
                before,
                after,
            },
            &[a],
        )
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Matmul, &[a, b])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        self.record(Op::Transpose, &[a])
    }

    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let op = Op::Conv2d { stride, padding };
        match bias {
            Some(b) => self.record(op, &[x, w, b]),
            None => self.record(op, &[x, w]),
        }
    }

    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.conv_transpose2d_padded(x, w, bias, stride, padding, (0, 0))
    }

    pub fn conv_transpose2d_padded(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: (usize, usize),
    ) -> Result<Var> {
        let op = Op::ConvTranspose2d {
            stride,
            padding,
            output_padding,
        };
        match bias {
            Some(b) => self.record(op, &[x, w, b]),
            None => self.record(op, &[x, w]),
        }
    }

    pub fn conv2d_weight_grad(
        &self,
        x: Var,
        gy: Var,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.record(
            Op::Conv2dWeightGrad {
                kernel,
                stride,
                padding,
            },
            &[x, gy],
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: f32) -> Result<Var> {
        self.record(Op::LeakyRelu(slope), &[a])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.record(Op::Relu, &[a])
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.record(Op::Tanh, &[a])
    }

    /// Per-sample Euclidean norm over all non-leading axes, `(N, ..) -> (N,)`.
    pub fn l2_norm_per_sample(&self, a: Var) -> Result<Var> {
        self.record(Op::L2NormPerSample, &[a])
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires them. With `create_graph`, the returned gradients are
    /// recorded nodes and can be differentiated again.
    pub fn backward(&self, loss: Var, create_graph: bool) -> Result<Gradients> {
        let grads = self.propagate(loss, None, create_graph)?;
        let nodes = self.nodes.borrow();
        let by_node = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| match (g, &nodes[id].op) {
                (Some(g), Op::Leaf) if nodes[id].requires_grad => Some((id, g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { by_node })
    }

    /// Gradients of `loss` with respect to `wrt` only. Nodes off every path
    /// to `wrt` are skipped. A target the loss does not depend on gets a
    /// zero gradient.
    pub fn grad(&self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        for &w in wrt {
            self.check(w)?;
        }
        let grads = self.propagate(loss, Some(wrt), create_graph)?;
        wrt.iter()
            .map(|&w| match grads.get(w.id).copied().flatten() {
                Some(g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(&self.shape(w)))),
            })
            .collect()
    }

    fn propagate(&self, loss: Var, wrt: Option<&[Var]>, create_graph: bool) -> Result<Vec<Option<Var>>> {
        self.check(loss)?;
        let loss_shape = self.shape(loss);
        if numel(&loss_shape) != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let n = loss.id + 1;
        let mut grads: Vec<Option<Var>> = vec![None; n];

        let relevant: Vec<bool> = {
            let nodes = self.nodes.borrow();
            match wrt {
                None => nodes[..n].iter().map(|nd| nd.requires_grad).collect(),
                Some(targets) => {
                    let mut reach = vec![false; n];
                    for t in targets {
                        if t.id < n {
                            reach[t.id] = true;
                        }
                    }
                    for id in 0..n {
                        if !reach[id] {
                            reach[id] = nodes[id].inputs.iter().any(|&i| reach[i]);
                        }
                    }
                    reach
                        .iter()
                        .zip(&nodes[..n])
                        .map(|(&r, nd)| r && nd.requires_grad)
                        .collect()
                }
            }
        };
        if !relevant[loss.id] {
            return Ok(grads);
        }

        let _mode = self.set_grad_mode(create_graph);
        grads[loss.id] = Some(self.constant(Tensor::ones(&loss_shape)));
        for id in (0..n).rev() {
            let Some(g) = grads[id] else { continue };
            let (op, inputs) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].inputs.clone())
            };
            if op == Op::Leaf {
                continue;
            }
            let needs: Vec<bool> = inputs.iter().map(|&i| relevant[i]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let in_vars: Vec<Var> = inputs
                .iter()
                .map(|&i| Var {
                    id: i,
                    tape: self.id,
                })
                .collect();
            let out = Var { id, tape: self.id };
            let in_grads = self.vjp(&op, &in_vars, out, g, &needs)?;
            for ((&i, gi), need) in inputs.iter().zip(in_grads).zip(&needs) {
                let (Some(gi), true) = (gi, *need) else { continue };
                grads[i] = Some(match grads[i] {
                    None => gi,
                    Some(prev) => self.add(prev, gi)?,
                });
            }
            if wrt.is_some() {
                grads[id] = None;
            }
        }
        Ok(grads)
    }

    /// Sums `g` down to `shape` when it was produced by scalar broadcasting.
    fn unbroadcast(&self, g: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(g) == shape {
            Ok(g)
        } else {
            self.sum_to(g, shape)
        }
    }

    /// Vector-Jacobian products of one node, written with recorded primitives.
    fn vjp(&self, op: &Op, x: &[Var], out: Var, g: Var, needs: &[bool]) -> Result<Vec<Option<Var>>> {
        let need = |i: usize| needs.get(i).copied().unwrap_or(false);
        let shape = |i: usize| self.shape(x[i]);
        let mut res: Vec<Option<Var>> = vec![None; x.len()];
        match op {
            Op::Leaf => {}
            Op::Add => {
                for i in 0..2 {
                    if need(i) {
                        res[i] = Some(self.unbroadcast(g, &shape(i))?);
                    }
                }
            }
            Op::Sub => {
                if need(0) {
                    res[0] = Some(self.unbroadcast(g, &shape(0))?);
                }
                if need(1) {
                    let ng = self.neg(g)?;
                    res[1] = Some(self.unbroadcast(ng, &shape(1))?);
                }
            }
            Op::Mul => {
                if need(0) {
                    let t = self.mul(g, x[1])?;
                    res[0] = Some(self.unbroadcast(t, &shape(0))?);
                }
                if need(1) {
                    let t = self.mul(g, x[0])?;
                    res[1] = Some(self.unbroadcast(t, &shape(1))?);
                }
            }
            Op::Div => {
                let q = self.div(g, x[1])?;
                if need(0) {
                    res[0] = Some(self.unbroadcast(q, &shape(0))?);
                }
                if need(1) {
                    let t = self.neg(self.mul(q, out)?)?;
                    res[1] = Some(self.unbroadcast(t, &shape(1))?);
                }
            }
            Op::Scale(c) => res[0] = Some(self.scale(g, *c)?),
            Op::Shift(_) => res[0] = Some(g),
            Op::Square => {
                let two_x = self.scale(x[0], 2.0)?;
                res[0] = Some(self.mul(g, two_x)?);
            }
            Op::Sqrt => {
                let half = self.scale(g, 0.5)?;
                res[0] = Some(self.div(half, out)?);
            }
            Op::Abs => {
                let s = self.constant(kernels::sign(&self.value(x[0])));
                res[0] = Some(self.mul(g, s)?);
            }
            Op::Sum => res[0] = Some(self.broadcast_to(g, &shape(0))?),
            Op::Mean => {
                let s = shape(0);
                let b = self.broadcast_to(g, &s)?;
                res[0] = Some(self.scale(b, 1.0 / numel(&s) as f32)?);
            }
            Op::SumTo(_) => res[0] = Some(self.broadcast_to(g, &shape(0))?),
            Op::BroadcastTo(_) | Op::BroadcastSpatial { .. } => {
                res[0] = Some(self.sum_to(g, &shape(0))?)
            }
            Op::Reshape(_) => res[0] = Some(self.reshape(g, &shape(0))?),
            Op::Concat => {
                let mut offset = 0;
                for (i, slot) in res.iter_mut().enumerate() {
                    let c = shape(i)[1];
                    if need(i) {
                        *slot = Some(self.slice(g, 1, offset, c)?);
                    }
                    offset += c;
                }
            }
            Op::Slice { axis, start, len } => {
                let dim = shape(0)[*axis];
                res[0] = Some(self.pad(g, *axis, *start, dim - start - len)?);
            }
            Op::Pad { axis, before, .. } => {
                let dim = shape(0)[*axis];
                res[0] = Some(self.slice(g, *axis, *before, dim)?);
            }
            Op::Matmul => {
                if need(0) {
                    let bt = self.transpose(x[1])?;
                    res[0] = Some(self.matmul(g, bt)?);
                }
                if need(1) {
                    let at = self.transpose(x[0])?;
                    res[1] = Some(self.matmul(at, g)?);
                }
            }
            Op::Transpose => res[0] = Some(self.transpose(g)?),
            Op::Conv2d { stride, padding } => {
                let (s, p) = (*stride, *padding);
                let ws = shape(1);
                if need(0) {
                    let op = self.conv_output_padding(&shape(0), &self.shape(g), &ws, s, p);
                    res[0] = Some(self.conv_transpose2d_padded(g, x[1], None, s, p, op)?);
                }
                if need(1) {
                    res[1] = Some(self.conv2d_weight_grad(x[0], g, (ws[2], ws[3]), s, p)?);
                }
                if need(2) {
                    res[2] = Some(self.bias_grad(g)?);
                }
            }
            Op::ConvTranspose2d { stride, padding, .. } => {
                let (s, p) = (*stride, *padding);
                let ws = shape(1);
                if need(0) {
                    res[0] = Some(self.conv2d(g, x[1], None, s, p)?);
                }
                if need(1) {
                    res[1] = Some(self.conv2d_weight_grad(g, x[0], (ws[2], ws[3]), s, p)?);
                }
                if need(2) {
                    res[2] = Some(self.bias_grad(g)?);
                }
            }
            Op::Conv2dWeightGrad { stride, padding, .. } => {
                let (s, p) = (*stride, *padding);
                if need(0) {
                    let op = self.conv_output_padding(&shape(0), &shape(1), &self.shape(g), s, p);
                    res[0] = Some(self.conv_transpose2d_padded(x[1], g, None, s, p, op)?);
                }
                if need(1) {
                    res[1] = Some(self.conv2d(x[0], g, None, s, p)?);
                }
            }
            Op::LeakyRelu(_) | Op::Relu => {
                let slope = match op {
                    Op::LeakyRelu(s) => *s,
                    _ => 0.0,
                };
                // piecewise-constant derivative; its own derivative is zero a.e.
                let mask = self.constant(kernels::leaky_relu_mask(&self.value(x[0]), slope));
                res[0] = Some(self.mul(g, mask)?);
            }
            Op::Tanh => {
                let sq = self.square(out)?;
                let d = self.shift(self.neg(sq)?, 1.0)?;
                res[0] = Some(self.mul(g, d)?);
            }
            Op::L2NormPerSample => {
                let s = shape(0);
                let r = self.div(g, self.shift(out, kernels::NORM_EPS)?)?;
                let mut bshape = vec![1usize; s.len()];
                bshape[0] = s[0];
                let r = self.broadcast_to(self.reshape(r, &bshape)?, &s)?;
                res[0] = Some(self.mul(r, x[0])?);
            }
        }
        Ok(res)
    }

    fn bias_grad(&self, g: Var) -> Result<Var> {
        let c = self.shape(g)[1];
        let s = self.sum_to(g, &[1, c, 1, 1])?;
        self.reshape(s, &[c])
    }

    /// Output padding that makes a transposed convolution of `y_shape`
    /// reproduce the spatial size of `x_shape`.
    fn conv_output_padding(
        &self,
        x_shape: &[usize],
        y_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> (usize, usize) {
        let extra = |n_in: usize, n_out: usize, k: usize| n_in + 2 * pad - ((n_out - 1) * stride + k);
        (
            extra(x_shape[2], y_shape[2], w_shape[2]),
            extra(x_shape[3], y_shape[3], w_shape[3]),
        )
    }
}
