use super::ops::{gemm, matmul_plan, split_axis, BinaryOp, UnaryOp};
use super::{Node, Op, Var};
use crate::tensor::{broadcast_strides, for_each_strided, for_each_strided2, strides};

/// Zero-initialised gradient buffer for `v`, or `None` when `v` does not
/// need a gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

pub(super) fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => binary(nodes, *kind, *a, *b, node.value.shape(), g, grads),
        Op::Unary { kind, x } => {
            let xs = nodes[x.0].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    let d = match *kind {
                        UnaryOp::Neg => -1.0,
                        UnaryOp::Scale(c) => c,
                        UnaryOp::AddScalar(_) => 1.0,
                        UnaryOp::Sigmoid => out[j] * (1.0 - out[j]),
                        UnaryOp::Sqrt => 0.5 / out[j],
                        UnaryOp::Square => 2.0 * xs[j],
                        UnaryOp::Exp => out[j],
                        UnaryOp::ClampMin(c) => {
                            if xs[j] > c {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    gx[j] += g[j] * d;
                }
            }
        }
        Op::MatMul { a, b } => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let plan = matmul_plan(ta.shape(), tb.shape()).expect("matmul shapes checked in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            if let Some(ga) = slot(nodes, grads, *a) {
                // dA = dC * B^T
                for &(ia, ib, io) in &plan.batches {
                    gemm(m, n, k, &g[io * m * n..], n, 1, &tb.data()[ib * k * n..], 1, n, 1.0, &mut ga[ia * m * k..]);
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // dB = A^T * dC
                for &(ia, ib, io) in &plan.batches {
                    gemm(k, m, n, &ta.data()[ia * m * k..], 1, k, &g[io * m * n..], n, 1, 1.0, &mut gb[ib * k * n..]);
                }
            }
        }
        Op::Softmax { x, axis } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                for o in 0..outer {
                    for q in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + q;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = nodes[gain.0].value.len();
            let gamma = nodes[gain.0].value.data();
            let rows = inv_std.len();
            if let Some(gg) = slot(nodes, grads, *gain) {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        dxhat[j] = g[r * d + j] * gamma[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[r * d + j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        gx[r * d + j] += scale * (d as f64 * dxhat[j] - s1 - xhat[r * d + j] * s2);
                    }
                }
            }
        }
        Op::Unfold { x, axis, plan } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                for o in 0..outer {
                    for i in 0..plan.out_len {
                        for j in 0..plan.size {
                            let Some(p) = plan.source(i, j) else { continue };
                            let src = ((o * plan.out_len + i) * plan.size + j) * inner;
                            let dst = (o * len + p) * inner;
                            for q in 0..inner {
                                gx[dst + q] += g[src + q];
                            }
                        }
                    }
                }
            }
        }
        Op::Conv1d { x, kernel, axis, plan } => {
            let xv = nodes[x.0].value.data();
            let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
            if let Some(gk) = slot(nodes, grads, *kernel) {
                for o in 0..outer {
                    for i in 0..plan.out_len {
                        let go = &g[(o * plan.out_len + i) * inner..][..inner];
                        for (j, gkj) in gk.iter_mut().enumerate() {
                            let Some(p) = plan.source(i, j) else { continue };
                            let s = &xv[(o * len + p) * inner..][..inner];
                            *gkj += go.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            let k = nodes[kernel.0].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..plan.out_len {
                        let go = &g[(o * plan.out_len + i) * inner..][..inner];
                        for (j, &kj) in k.iter().enumerate() {
                            let Some(p) = plan.source(i, j) else { continue };
                            let dst = &mut gx[(o * len + p) * inner..][..inner];
                            for (d, &v) in dst.iter_mut().zip(go) {
                                *d += kj * v;
                            }
                        }
                    }
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
            }
        }
        Op::Sum { x, map } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (gxi, &o) in gx.iter_mut().zip(map) {
                    *gxi += g[o];
                }
            }
        }
        Op::Mean { x, map, count } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let inv = 1.0 / *count as f64;
                for (gxi, &o) in gx.iter_mut().zip(map) {
                    *gxi += g[o] * inv;
                }
            }
        }
        Op::Std { x, map, count, mean } => {
            let xv = nodes[x.0].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                let n = *count as f64;
                for (j, (gxi, &o)) in gx.iter_mut().zip(map).enumerate() {
                    *gxi += g[o] * (xv[j] - mean[o]) / (n * out[o]);
                }
            }
        }
        Op::Embedding { table, indices } => {
            if let Some(gt) = slot(nodes, grads, *table) {
                let width = nodes[table.0].value.shape()[1];
                for (r, &idx) in indices.iter().enumerate() {
                    for e in 0..width {
                        gt[idx * width + e] += g[r * width + e];
                    }
                }
            }
        }
        Op::Permute { x, perm } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                // Walk the output in order; the matching source offset uses
                // the input strides permuted into output order.
                let src_strides = strides(nodes[x.0].value.shape());
                let mapped: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
                let mut o = 0;
                for_each_strided(node.value.shape(), &mapped, |s| {
                    gx[s] += g[o];
                    o += 1;
                });
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Concat { parts, axis } => {
            let base = node.value.shape();
            let (outer, total, inner) = split_axis(base, *axis);
            let mut start = 0;
            for &p in parts {
                let len = nodes[p.0].value.shape()[*axis];
                if let Some(gp) = slot(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &g[(o * total + start) * inner..][..len * inner];
                        let dst = &mut gp[o * len * inner..][..len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                start += len;
            }
        }
    }
}

fn binary(
    nodes: &[Node],
    kind: BinaryOp,
    a: Var,
    b: Var,
    out_shape: &[usize],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
    let same = va.shape() == vb.shape();
    let sa = broadcast_strides(va.shape(), out_shape);
    let sb = broadcast_strides(vb.shape(), out_shape);
    let (da, db) = (va.data(), vb.data());
    // Partial derivatives of `a op b` with respect to each operand.
    let da_fn = |_x: f64, y: f64| match kind {
        BinaryOp::Add | BinaryOp::Sub => 1.0,
        BinaryOp::Mul => y,
        BinaryOp::Div => 1.0 / y,
    };
    let db_fn = |x: f64, y: f64| match kind {
        BinaryOp::Add => 1.0,
        BinaryOp::Sub => -1.0,
        BinaryOp::Mul => x,
        BinaryOp::Div => -x / (y * y),
    };
    if let Some(ga) = slot(nodes, grads, a) {
        if same {
            for j in 0..g.len() {
                ga[j] += g[j] * da_fn(da[j], db[j]);
            }
        } else {
            let mut o = 0;
            for_each_strided2(out_shape, &sa, &sb, |ia, ib| {
                ga[ia] += g[o] * da_fn(da[ia], db[ib]);
                o += 1;
            });
        }
    }
    if let Some(gb) = slot(nodes, grads, b) {
        if same {
            for j in 0..g.len() {
                gb[j] += g[j] * db_fn(da[j], db[j]);
            }
        } else {
            let mut o = 0;
            for_each_strided2(out_shape, &sa, &sb, |ia, ib| {
                gb[ib] += g[o] * db_fn(da[ia], db[ib]);
                o += 1;
            });
        }
    }
}
