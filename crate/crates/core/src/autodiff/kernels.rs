//! Forward kernels for every primitive.
//!
//! All reductions accumulate in a fixed order per output element, so a kernel
//! called twice on the same inputs returns bit-identical results.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Guard added to the per-sample norm in its derivative, which keeps the
/// gradient finite at a zero input.
pub const NORM_EPS: f32 = 1e-12;

pub(crate) fn unary(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    x.map(f)
}

/// Elementwise binary op. Shapes must match, or one side must hold a single
/// element which is broadcast over the other.
pub(crate) fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f32> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if bd.len() == 1 {
        let y = bd[0];
        return Ok(Tensor::from_parts(
            a.shape().to_vec(),
            ad.iter().map(|&x| f(x, y)).collect(),
        ));
    } else if ad.len() == 1 {
        let x = ad[0];
        return Ok(Tensor::from_parts(
            b.shape().to_vec(),
            bd.iter().map(|&y| f(x, y)).collect(),
        ));
    } else {
        return Err(Error::shape(op, a.shape(), b.shape()));
    };
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub(crate) fn sum_all(x: &Tensor) -> Tensor {
    let mut acc = 0.0f32;
    for &v in x.data() {
        acc += v;
    }
    Tensor::scalar(acc)
}

pub(crate) fn mean_all(x: &Tensor) -> Result<Tensor> {
    if x.numel() == 0 {
        return Err(Error::invalid("mean", "empty tensor"));
    }
    let s = sum_all(x).data()[0];
    Ok(Tensor::scalar(s / x.numel() as f32))
}

/// Checks that `small` broadcasts to `big`: either a single element, or the
/// same rank with every dim equal to the big dim or 1.
fn check_broadcastable(op: &'static str, small: &[usize], big: &[usize]) -> Result<()> {
    if numel(small) == 1 {
        return Ok(());
    }
    let ok = small.len() == big.len() && small.iter().zip(big).all(|(&s, &b)| s == b || s == 1);
    if ok {
        Ok(())
    } else {
        Err(Error::shape(op, small, big))
    }
}

/// For each flat index of `big`, the flat index in `small` it maps to under
/// broadcasting. Called with shapes already validated.
fn broadcast_index_map(small: &[usize], big: &[usize]) -> Vec<usize> {
    let total = numel(big);
    if numel(small) == 1 {
        return vec![0; total];
    }
    let rank = big.len();
    // strides of `small`, zeroed on broadcast axes
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    let mut idx = vec![0usize; rank];
    let mut out = Vec::with_capacity(total);
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < big[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn sum_to(x: &Tensor, target: &[usize]) -> Result<Tensor> {
    check_broadcastable("sum_to", target, x.shape())?;
    if target == x.shape() {
        return Ok(x.clone());
    }
    let map = broadcast_index_map(target, x.shape());
    let mut out = vec![0.0f32; numel(target)];
    for (&v, &o) in x.data().iter().zip(&map) {
        out[o] += v;
    }
    Ok(Tensor::from_parts(target.to_vec(), out))
}

pub(crate) fn broadcast_to(x: &Tensor, target: &[usize]) -> Result<Tensor> {
    check_broadcastable("broadcast_to", x.shape(), target)?;
    if target == x.shape() {
        return Ok(x.clone());
    }
    let map = broadcast_index_map(x.shape(), target);
    let src = x.data();
    Ok(Tensor::from_parts(
        target.to_vec(),
        map.iter().map(|&i| src[i]).collect(),
    ))
}

pub(crate) fn broadcast_spatial(g: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let [n, c, h, w] = g.dims4()?;
    if h != 1 || w != 1 {
        return Err(Error::invalid(
            "broadcast_spatial",
            format!("input spatial dims must be 1x1, got {h}x{w}"),
        ));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid(
            "broadcast_spatial",
            format!("target dims must be positive, got {height}x{width}"),
        ));
    }
    let plane = height * width;
    let mut out = Vec::with_capacity(n * c * plane);
    for &v in g.data() {
        out.extend(std::iter::repeat_n(v, plane));
    }
    Ok(Tensor::from_parts(vec![n, c, height, width], out))
}

pub(crate) fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    x.clone().reshaped(shape)
}

/// Concatenation along axis 1 (channels for 4-D tensors).
pub(crate) fn concat(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    if first.shape().len() < 2 {
        return Err(Error::invalid("concat", "inputs must have rank >= 2"));
    }
    let lead = first.shape()[0];
    let tail = &first.shape()[2..];
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        if s.len() != first.shape().len() || s[0] != lead || &s[2..] != tail {
            return Err(Error::shape("concat", first.shape(), s));
        }
        channels += s[1];
    }
    let inner: usize = tail.iter().product();
    let mut data = Vec::with_capacity(lead * channels * inner);
    for n in 0..lead {
        for t in inputs {
            let block = t.shape()[1] * inner;
            data.extend_from_slice(&t.data()[n * block..(n + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = channels;
    Ok(Tensor::from_parts(shape, data))
}

fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let (outer, dim, inner) = axis_split("slice", x.shape(), axis)?;
    if start + len > dim {
        return Err(Error::invalid(
            "slice",
            format!("range {start}..{} exceeds axis length {dim}", start + len),
        ));
    }
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn pad(x: &Tensor, axis: usize, before: usize, after: usize) -> Result<Tensor> {
    let (outer, dim, inner) = axis_split("pad", x.shape(), axis)?;
    let new_dim = dim + before + after;
    let mut data = vec![0.0f32; outer * new_dim * inner];
    for o in 0..outer {
        let dst = (o * new_dim + before) * inner;
        let src = o * dim * inner;
        data[dst..dst + dim * inner].copy_from_slice(&x.data()[src..src + dim * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = new_dim;
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    };
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            axpy(row, av, &bd[p * n..(p + 1) * n]);
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn transpose(x: &Tensor) -> Result<Tensor> {
    let &[r, c] = x.shape() else {
        return Err(Error::invalid("transpose", format!("expected 2-D, got {:?}", x.shape())));
    };
    let d = x.data();
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Geometry of a strided, zero-padded 2-D correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        cin: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid(op, "stride must be positive"));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::invalid(op, "kernel must be at least 1x1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::invalid(
                op,
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in range.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        valid_range(self.ow, self.w, kx, self.stride, self.pad)
    }

    fn valid_oy(&self, ky: usize) -> (usize, usize) {
        valid_range(self.oh, self.h, ky, self.stride, self.pad)
    }
}

/// `[lo, hi)` of output positions `o` with `0 <= o*s + k - p < n_in`.
fn valid_range(n_out: usize, n_in: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    // o*s + k - p <= n_in - 1  <=>  o <= (n_in - 1 + p - k) / s
    let hi = if n_in + p > k {
        ((n_in - 1 + p - k) / s + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds one sample `(cin, h, w)` into `(cin*kh*kw, oh*ow)`.
fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let p = g.cols();
    col.fill(0.0);
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_oy(ky);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_ox(kx);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &mut col[r * p..(r + 1) * p];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox0..ox1 {
                        dst[ox] = src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Same unfolding, transposed: `(oh*ow, cin*kh*kw)`.
fn im2col_t(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let r_total = g.rows();
    col.fill(0.0);
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_oy(ky);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_ox(kx);
                let r = (ci * g.kh + ky) * g.kw + kx;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    for ox in ox0..ox1 {
                        let ix = ox * g.stride + kx - g.pad;
                        col[(oy * g.ow + ox) * r_total + r] = plane[iy * g.w + ix];
                    }
                }
            }
        }
    }
}

/// Folds `(cin*kh*kw, oh*ow)` columns back into a `(cin, h, w)` sample,
/// accumulating overlapping taps. Adjoint of `im2col`.
fn col2im(col: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = g.valid_oy(ky);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.valid_ox(kx);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &col[r * p..(r + 1) * p];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox0..ox1 {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::shape(op, b.shape(), &[channels]));
        }
    }
    Ok(())
}

/// Cross-correlation of `x (N, Cin, H, W)` with `w (Cout, Cin, KH, KW)`.
pub(crate) fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [n, cin, h, wd] = x.dims4()?;
    let [cout, wcin, kh, kw] = w.dims4()?;
    if cin != wcin {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    }
    check_bias("conv2d", bias, cout)?;
    let g = ConvGeom::new("conv2d", cin, h, wd, kh, kw, stride, pad)?;
    let (rows, p) = (g.rows(), g.cols());
    let mut col = vec![0.0f32; rows * p];
    let mut out = vec![0.0f32; n * cout * p];
    let wdat = w.data();
    for ni in 0..n {
        im2col(&x.data()[ni * cin * h * wd..(ni + 1) * cin * h * wd], &g, &mut col);
        for co in 0..cout {
            let orow = &mut out[(ni * cout + co) * p..(ni * cout + co + 1) * p];
            if let Some(b) = bias {
                orow.fill(b.data()[co]);
            }
            let wrow = &wdat[co * rows..(co + 1) * rows];
            for (r, &wv) in wrow.iter().enumerate() {
                axpy(orow, wv, &col[r * p..(r + 1) * p]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, cout, g.oh, g.ow], out))
}

/// Output extent of a transposed convolution along one axis.
pub(crate) fn conv_transpose_extent(
    op: &'static str,
    n_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid(op, "stride must be positive"));
    }
    if output_padding >= stride {
        return Err(Error::invalid(
            op,
            format!("output padding {output_padding} must be smaller than stride {stride}"),
        ));
    }
    if n_in == 0 {
        return Err(Error::invalid(op, "empty input"));
    }
    let full = (n_in - 1) * stride + k + output_padding;
    if full <= 2 * pad {
        return Err(Error::invalid(op, format!("padding {pad} leaves no output")));
    }
    Ok(full - 2 * pad)
}

/// Transposed convolution: the adjoint of `conv2d` with weight
/// `(C_y, C_out, KH, KW)` mapping `C_y` input channels to `C_out` outputs.
pub(crate) fn conv_transpose2d(
    y: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    output_padding: (usize, usize),
) -> Result<Tensor> {
    let [n, cy, hy, wy] = y.dims4()?;
    let [wcy, cout, kh, kw] = w.dims4()?;
    if cy != wcy {
        return Err(Error::shape("conv_transpose2d", y.shape(), w.shape()));
    }
    check_bias("conv_transpose2d", bias, cout)?;
    let h = conv_transpose_extent("conv_transpose2d", hy, kh, stride, pad, output_padding.0)?;
    let wd = conv_transpose_extent("conv_transpose2d", wy, kw, stride, pad, output_padding.1)?;
    let g = ConvGeom::new("conv_transpose2d", cout, h, wd, kh, kw, stride, pad)?;
    debug_assert_eq!((g.oh, g.ow), (hy, wy));
    let (rows, p) = (g.rows(), g.cols());
    let mut col = vec![0.0f32; rows * p];
    let mut out = vec![0.0f32; n * cout * h * wd];
    let wdat = w.data();
    for ni in 0..n {
        let ysample = &y.data()[ni * cy * p..(ni + 1) * cy * p];
        col.fill(0.0);
        for r in 0..rows {
            let crow = &mut col[r * p..(r + 1) * p];
            for c in 0..cy {
                axpy(crow, wdat[c * rows + r], &ysample[c * p..(c + 1) * p]);
            }
        }
        let osample = &mut out[ni * cout * h * wd..(ni + 1) * cout * h * wd];
        col2im(&col, &g, osample);
        if let Some(b) = bias {
            for (c, plane) in osample.chunks_mut(h * wd).enumerate() {
                let bv = b.data()[c];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, cout, h, wd], out))
}

/// Gradient of `conv2d` with respect to its weight: correlates the input
/// `x (N, Cin, H, W)` with output-shaped `gy (N, Cout, OH, OW)`, giving
/// `(Cout, Cin, KH, KW)`.
pub(crate) fn conv2d_weight_grad(
    x: &Tensor,
    gy: &Tensor,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [n, cin, h, wd] = x.dims4()?;
    let [gn, cout, goh, gow] = gy.dims4()?;
    let g = ConvGeom::new("conv2d_weight_grad", cin, h, wd, kernel.0, kernel.1, stride, pad)?;
    if gn != n || goh != g.oh || gow != g.ow {
        return Err(Error::shape("conv2d_weight_grad", x.shape(), gy.shape()));
    }
    let (rows, p) = (g.rows(), g.cols());
    let mut colt = vec![0.0f32; p * rows];
    let mut out = vec![0.0f32; cout * rows];
    for ni in 0..n {
        im2col_t(&x.data()[ni * cin * h * wd..(ni + 1) * cin * h * wd], &g, &mut colt);
        let gsample = &gy.data()[ni * cout * p..(ni + 1) * cout * p];
        for co in 0..cout {
            let orow = &mut out[co * rows..(co + 1) * rows];
            for (pi, &gv) in gsample[co * p..(co + 1) * p].iter().enumerate() {
                axpy(orow, gv, &colt[pi * rows..(pi + 1) * rows]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![cout, cin, kernel.0, kernel.1], out))
}

pub(crate) fn leaky_relu(x: &Tensor, slope: f32) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

/// Derivative of leaky ReLU as a constant mask.
pub(crate) fn leaky_relu_mask(x: &Tensor, slope: f32) -> Tensor {
    x.map(|v| if v > 0.0 { 1.0 } else { slope })
}

pub(crate) fn sign(x: &Tensor) -> Tensor {
    x.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// `sqrt(sum(x_n^2))` for each leading-axis slice `x_n`.
pub(crate) fn l2_norm_per_sample(x: &Tensor) -> Result<Tensor> {
    let n = *x
        .shape()
        .first()
        .ok_or_else(|| Error::invalid("l2_norm_per_sample", "input must have a batch axis"))?;
    if n == 0 {
        return Err(Error::invalid("l2_norm_per_sample", "empty batch"));
    }
    let inner = x.numel() / n;
    let out = x
        .data()
        .chunks(inner.max(1))
        .take(n)
        .map(|s| {
            let mut acc = 0.0f32;
            for &v in s {
                acc += v * v;
            }
            acc.sqrt()
        })
        .collect();
    Ok(Tensor::from_parts(vec![n], out))
}
