//! Forward definitions of every differentiable op.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_strided, for_each_strided2, strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Sigmoid,
    Sqrt,
    Square,
    Exp,
    /// `max(x, c)`; gradient passes only where `x > c`.
    ClampMin(f64),
}

impl UnaryOp {
    #[inline]
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Scale(c) => c * x,
            UnaryOp::AddScalar(c) => x + c,
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::Exp => x.exp(),
            UnaryOp::ClampMin(c) => x.max(c),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    EdgeReplicate,
    Zero,
}

/// How output positions are laid over the input axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    /// Stride 1, centred windows, output length equals input length.
    Same,
    /// Left-aligned windows starting at `i * stride`, output length
    /// `floor(T / stride)`; positions past the end are padded.
    Downsample,
    /// Only windows fully inside the input: `floor((T - w) / s) + 1`.
    Valid,
    /// As `Valid`, except an input shorter than the window yields one
    /// window padded at the end.
    Cover,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub size: usize,
    pub stride: usize,
    pub mode: WindowMode,
    pub padding: Padding,
}

impl Window {
    pub fn same(size: usize, padding: Padding) -> Self {
        Window {
            size,
            stride: 1,
            mode: WindowMode::Same,
            padding,
        }
    }

    pub fn downsample(size: usize, stride: usize, padding: Padding) -> Self {
        Window {
            size,
            stride,
            mode: WindowMode::Downsample,
            padding,
        }
    }

    pub fn valid(size: usize, stride: usize) -> Self {
        Window {
            size,
            stride,
            mode: WindowMode::Valid,
            padding: Padding::Zero,
        }
    }

    pub fn cover(size: usize, stride: usize, padding: Padding) -> Self {
        Window {
            size,
            stride,
            mode: WindowMode::Cover,
            padding,
        }
    }

    pub(crate) fn plan(&self, len: usize) -> Result<WindowPlan> {
        if self.size == 0 || self.stride == 0 {
            return Err(Error::shape("window", "kernel size and stride must be >= 1"));
        }
        if len == 0 {
            return Err(Error::shape("window", "input length must be >= 1"));
        }
        let (offset, out_len) = match self.mode {
            WindowMode::Same => {
                if self.stride != 1 {
                    return Err(Error::shape("window", "same-length windows need stride 1"));
                }
                ((self.size - 1) / 2, len)
            }
            WindowMode::Downsample => (0, len / self.stride),
            WindowMode::Valid => {
                if len < self.size {
                    return Err(Error::shape(
                        "window",
                        format!("length {len} shorter than window {}", self.size),
                    ));
                }
                (0, (len - self.size) / self.stride + 1)
            }
            WindowMode::Cover => (0, len.saturating_sub(self.size) / self.stride + 1),
        };
        if out_len == 0 {
            return Err(Error::shape(
                "window",
                format!("length {len} with stride {} leaves no output positions", self.stride),
            ));
        }
        Ok(WindowPlan {
            len,
            size: self.size,
            stride: self.stride,
            offset,
            out_len,
            padding: self.padding,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct WindowPlan {
    pub len: usize,
    pub size: usize,
    pub stride: usize,
    pub offset: usize,
    pub out_len: usize,
    pub padding: Padding,
}

impl WindowPlan {
    /// Input position feeding tap `j` of output `i`, or `None` for a zero pad.
    #[inline]
    pub fn source(&self, i: usize, j: usize) -> Option<usize> {
        let pos = (i * self.stride + j) as isize - self.offset as isize;
        if pos >= 0 && (pos as usize) < self.len {
            Some(pos as usize)
        } else {
            match self.padding {
                Padding::EdgeReplicate => Some(pos.clamp(0, self.len as isize - 1) as usize),
                Padding::Zero => None,
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output-offset map of a reduction: entry `i` is the output slot that
/// input element `i` folds into.
pub(crate) fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let mut st = strides(&kept);
    for &a in axes {
        st[a] = 0;
    }
    let mut map = Vec::with_capacity(shape.iter().product());
    for_each_strided(shape, &st, |o| map.push(o));
    let count = axes.iter().map(|&a| shape[a]).product();
    (kept, map, count)
}

/// `c = a * b + beta * c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted extents keep every strided access inside the
    // borrowed slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) struct MatMulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Matrix-index triples (a, b, out) for each product.
    pub batches: Vec<(usize, usize, usize)>,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", format!("operands need rank >= 2, got {a:?} and {b:?}")));
    }
    let (ra, rb) = (a.len(), b.len());
    let (m, k, k2, n) = (a[ra - 2], a[ra - 1], b[rb - 2], b[rb - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner extents differ: {a:?} x {b:?}")));
    }
    if rb == 2 {
        // Fold every leading axis of `a` into its row count.
        let rows: usize = a[..ra - 1].iter().product();
        let mut out_shape = a[..ra - 1].to_vec();
        out_shape.push(n);
        return Ok(MatMulPlan {
            m: rows,
            k,
            n,
            batches: vec![(0, 0, 0)],
            out_shape,
        });
    }
    let (ba, bb) = (&a[..ra - 2], &b[..rb - 2]);
    let batch = broadcast_shape(ba, bb)
        .ok_or_else(|| Error::shape("matmul", format!("batch extents not broadcastable: {a:?} x {b:?}")))?;
    let sa = broadcast_strides(ba, &batch);
    let sb = broadcast_strides(bb, &batch);
    let mut batches = Vec::with_capacity(batch.iter().product());
    let mut o = 0;
    for_each_strided2(&batch, &sa, &sb, |ia, ib| {
        batches.push((ia, ib, o));
        o += 1;
    });
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatMulPlan {
        m,
        k,
        n,
        batches,
        out_shape,
    })
}

impl Tape {
    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::shape(
                "elementwise",
                format!("{:?} and {:?} are not broadcastable", ta.shape(), tb.shape()),
            )
        })?;
        if kind == BinaryOp::Div && cfg!(debug_assertions) && tb.data().iter().any(|&x| x == 0.0) {
            return Err(Error::Numeric {
                op: "div",
                detail: "division by exact zero".into(),
            });
        }
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| kind.apply(x, y)).collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let (da, db) = (ta.data(), tb.data());
            let mut out = Vec::with_capacity(out_shape.iter().product());
            for_each_strided2(&out_shape, &sa, &sb, |ia, ib| out.push(kind.apply(da[ia], db[ib])));
            out
        };
        self.push(Tensor::from_parts(out_shape, data), Op::Binary { kind, a, b }, &[a, b])
    }

    /// `elementwise(kind, a, b)`: binary when `b` is given, unary otherwise.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (ElementwiseKind::Binary(op), Some(b)) => self.binary(op, a, b),
            (ElementwiseKind::Unary(op), None) => self.unary(op, a),
            (ElementwiseKind::Binary(_), None) => Err(Error::shape("elementwise", "binary op needs two operands")),
            (ElementwiseKind::Unary(_), Some(_)) => Err(Error::shape("elementwise", "unary op takes one operand")),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryOp, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.map(|v| kind.apply(v));
        self.push(out, Op::Unary { kind, x }, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(c), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }

    /// Batched matrix product over the last two axes; leading axes
    /// broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let plan = matmul_plan(ta.shape(), tb.shape())?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        for &(ia, ib, io) in &plan.batches {
            gemm(
                m,
                k,
                n,
                &ta.data()[ia * m * k..],
                k,
                1,
                &tb.data()[ib * k * n..],
                n,
                1,
                0.0,
                &mut out[io * m * n..],
            );
        }
        self.push(Tensor::from_parts(plan.out_shape, out), Op::MatMul { a, b }, &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.value(x).rank();
        if r < 2 {
            return Err(Error::shape("transpose", "rank must be >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        self.push(out, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape { x }, &[x])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for q in 0..inner {
                let at = |j: usize| (o * len + j) * inner + q;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }, &[x])
    }

    /// Layer normalization over the last axis with a learnable per-position
    /// gain and bias; epsilon 1e-5 inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.shape(p) != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} shape {:?} != [{d}]", self.shape(p)),
                ));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.len() / d;
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Extracts sliding windows along `axis`; the window taps become a new
    /// axis placed right after it: `[.., T, ..] -> [.., T', w, ..]`.
    pub fn unfold(&mut self, x: Var, axis: usize, window: Window) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("unfold", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let plan = window.plan(t.shape()[axis])?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; outer * plan.out_len * plan.size * inner];
        for o in 0..outer {
            for i in 0..plan.out_len {
                for j in 0..plan.size {
                    let Some(p) = plan.source(i, j) else { continue };
                    let dst = ((o * plan.out_len + i) * plan.size + j) * inner;
                    let s = (o * len + p) * inner;
                    out[dst..dst + inner].copy_from_slice(&src[s..s + inner]);
                }
            }
        }
        let mut shape = t.shape()[..axis].to_vec();
        shape.extend([plan.out_len, plan.size]);
        shape.extend_from_slice(&t.shape()[axis + 1..]);
        self.push(Tensor::from_parts(shape, out), Op::Unfold { x, axis, plan }, &[x])
    }

    /// Depthwise 1-D convolution along `axis` with one kernel shared by
    /// every other position. `kernel` has shape `[w]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, axis: usize, window: Window) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("conv1d", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        if self.shape(kernel) != [window.size] {
            return Err(Error::shape(
                "conv1d",
                format!("kernel shape {:?} != [{}]", self.shape(kernel), window.size),
            ));
        }
        let plan = window.plan(t.shape()[axis])?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let (src, k) = (t.data(), self.value(kernel).data());
        let mut out = vec![0.0; outer * plan.out_len * inner];
        for o in 0..outer {
            for i in 0..plan.out_len {
                let dst = &mut out[(o * plan.out_len + i) * inner..][..inner];
                for (j, &kj) in k.iter().enumerate() {
                    let Some(p) = plan.source(i, j) else { continue };
                    let s = &src[(o * len + p) * inner..][..inner];
                    for (d, &v) in dst.iter_mut().zip(s) {
                        *d += kj * v;
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = plan.out_len;
        self.push(Tensor::from_parts(shape, out), Op::Conv1d { x, kernel, axis, plan }, &[x, kernel])
    }

    /// Max pooling along `axis`. Ties resolve to the lowest tap index, and
    /// the backward pass routes the gradient there.
    pub fn maxpool1d(&mut self, x: Var, axis: usize, window: Window) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::shape("maxpool1d", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let plan = window.plan(t.shape()[axis])?;
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let n_out = outer * plan.out_len * inner;
        let mut out = vec![f64::NEG_INFINITY; n_out];
        let mut argmax = vec![usize::MAX; n_out];
        for o in 0..outer {
            for i in 0..plan.out_len {
                for j in 0..plan.size {
                    let Some(p) = plan.source(i, j) else { continue };
                    for q in 0..inner {
                        let s = (o * len + p) * inner + q;
                        let d = (o * plan.out_len + i) * inner + q;
                        if src[s] > out[d] || argmax[d] == usize::MAX {
                            out[d] = src[s];
                            argmax[d] = s;
                        }
                    }
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = plan.out_len;
        self.push(Tensor::from_parts(shape, out), Op::MaxPool { x, argmax }, &[x])
    }

    fn check_axes(&self, x: Var, axes: &[usize], op: &'static str) -> Result<()> {
        let r = self.value(x).rank();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if axes.is_empty() || sorted.len() != axes.len() || sorted.iter().any(|&a| a >= r) {
            return Err(Error::shape(op, format!("invalid axes {axes:?} for rank {r}")));
        }
        Ok(())
    }

    fn reduced_shape(kept: Vec<usize>, axes: &[usize], keep_dims: bool) -> Vec<usize> {
        if keep_dims {
            kept
        } else {
            kept.into_iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, d)| d)
                .collect()
        }
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        self.check_axes(x, axes, "sum")?;
        let t = self.value(x);
        let (kept, map, _) = reduce_map(t.shape(), axes);
        let mut out = vec![0.0; kept.iter().product()];
        for (&o, &v) in map.iter().zip(t.data()) {
            out[o] += v;
        }
        let shape = Self::reduced_shape(kept, axes, keep_dims);
        self.push(Tensor::from_parts(shape, out), Op::Sum { x, map }, &[x])
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.sum(x, &axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        self.check_axes(x, axes, "mean")?;
        let t = self.value(x);
        let (kept, map, count) = reduce_map(t.shape(), axes);
        let mut out = vec![0.0; kept.iter().product()];
        for (&o, &v) in map.iter().zip(t.data()) {
            out[o] += v;
        }
        out.iter_mut().for_each(|v| *v /= count as f64);
        let shape = Self::reduced_shape(kept, axes, keep_dims);
        self.push(Tensor::from_parts(shape, out), Op::Mean { x, map, count }, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        if axes.is_empty() {
            return Ok(x);
        }
        self.mean(x, &axes, false)
    }

    /// Population standard deviation, `sqrt(var + 1e-8)`.
    pub fn std(&mut self, x: Var, axes: &[usize], keep_dims: bool) -> Result<Var> {
        const EPS: f64 = 1e-8;
        self.check_axes(x, axes, "std")?;
        let t = self.value(x);
        let (kept, map, count) = reduce_map(t.shape(), axes);
        let n_out = kept.iter().product();
        let mut mean = vec![0.0; n_out];
        for (&o, &v) in map.iter().zip(t.data()) {
            mean[o] += v;
        }
        mean.iter_mut().for_each(|v| *v /= count as f64);
        let mut var = vec![0.0; n_out];
        for (&o, &v) in map.iter().zip(t.data()) {
            var[o] += (v - mean[o]) * (v - mean[o]);
        }
        let out: Vec<f64> = var.iter().map(|v| (v / count as f64 + EPS).sqrt()).collect();
        let shape = Self::reduced_shape(kept, axes, keep_dims);
        self.push(Tensor::from_parts(shape, out), Op::Std { x, map, count, mean }, &[x])
    }

    /// Gathers rows of `table` (`[V, E]`). The output has shape
    /// `index_shape + [E]`. `feature` names the table in index errors.
    pub fn embedding(&mut self, table: Var, indices: &[usize], index_shape: &[usize], feature: &str) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::shape("embedding", format!("table must be [V, E], got {:?}", t.shape())));
        }
        if index_shape.iter().product::<usize>() != indices.len() {
            return Err(Error::shape("embedding", "index shape does not match index count"));
        }
        let (vocab, width) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= vocab {
                return Err(Error::Index {
                    feature: feature.to_string(),
                    row: i,
                    vocab,
                });
            }
            out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(width);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }
}

/// Op selector for [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Binary(BinaryOp),
    Unary(UnaryOp),
}
