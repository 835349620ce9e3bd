//! Adjoint rules, one arm per op.

use crate::gemm::{gemm_acc, Layout};
use crate::graph::{gelu_grad, sigmoid, Node, Op, Var};
use crate::tensor::{axis_split, Real};

fn slot<'a, F: Real>(nodes: &[Node<F>], grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
}

pub(crate) fn propagate<F: Real>(nodes: &[Node<F>], i: usize, gy: &[F], grads: &mut [Option<Vec<F>>]) {
    let node = &nodes[i];
    let y = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let av = val(*a);
            let bv = val(*b);
            if let Some(ga) = slot(nodes, grads, *a) {
                for bi in 0..batch {
                    let boff = if *shared_rhs { 0 } else { bi * k * n };
                    gemm_acc(
                        (m, n, k),
                        &gy[bi * m * n..(bi + 1) * m * n],
                        Layout::rows(n),
                        &bv[boff..boff + k * n],
                        Layout::transposed(n),
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        Layout::rows(k),
                    );
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for bi in 0..batch {
                    let boff = if *shared_rhs { 0 } else { bi * k * n };
                    gemm_acc(
                        (k, m, n),
                        &av[bi * m * k..(bi + 1) * m * k],
                        Layout::transposed(k),
                        &gy[bi * m * n..(bi + 1) * m * n],
                        Layout::rows(n),
                        &mut gb[boff..boff + k * n],
                        Layout::rows(n),
                    );
                }
            }
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(node.op, Op::Sub { .. }) {
                -F::one()
            } else {
                F::one()
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(gy).for_each(|(o, &g)| *o = *o + g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let nb = gb.len();
                for (j, &g) in gy.iter().enumerate() {
                    gb[j % nb] = gb[j % nb] + sign * g;
                }
            }
        }
        Op::Mul { a, b } => {
            let av = val(*a);
            let bv = val(*b);
            let nb = bv.len();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (j, (o, &g)) in ga.iter_mut().zip(gy).enumerate() {
                    *o = *o + g * bv[j % nb];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (j, &g) in gy.iter().enumerate() {
                    gb[j % nb] = gb[j % nb] + g * av[j];
                }
            }
        }
        Op::Scale { a, s } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(gy).for_each(|(o, &g)| *o = *o + *s * g);
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(gy).for_each(|(o, &g)| *o = *o + g);
            }
        }
        Op::Transpose {
            a,
            batch,
            rows,
            cols,
        } => {
            let (rows, cols) = (*rows, *cols);
            if let Some(ga) = slot(nodes, grads, *a) {
                for b in 0..*batch {
                    let off = b * rows * cols;
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[off + r * cols + c] = ga[off + r * cols + c] + gy[off + c * rows + r];
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(node.value.shape(), *axis);
            let mut start = 0;
            for &v in inputs {
                let n = nodes[v.0].value.shape()[*axis];
                if let Some(gv) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &gy[(o * total + start) * inner..(o * total + start + n) * inner];
                        let dst = &mut gv[o * n * inner..(o + 1) * n * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                    }
                }
                start += n;
            }
        }
        Op::Slice {
            a,
            axis,
            start,
            len,
        } => {
            let (outer, n, inner) = axis_split(nodes[a.0].value.shape(), *axis);
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    let dst = &mut ga[(o * n + start) * inner..(o * n + start + len) * inner];
                    let src = &gy[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &g)| *d = *d + g);
                }
            }
        }
        Op::SumAxis { a, axis, mean } => {
            let (outer, n, inner) = axis_split(nodes[a.0].value.shape(), *axis);
            let s = if *mean {
                F::one() / F::from_usize(n).unwrap()
            } else {
                F::one()
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            let idx = (o * n + i) * inner + j;
                            ga[idx] = ga[idx] + s * gy[o * inner + j];
                        }
                    }
                }
            }
        }
        Op::SumAll { a, mean } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let s = if *mean {
                    gy[0] / F::from_usize(ga.len()).unwrap()
                } else {
                    gy[0]
                };
                ga.iter_mut().for_each(|o| *o = *o + s);
            }
        }
        Op::Conv1d {
            x,
            w,
            b,
            stride,
            kernel,
            batch,
            t_in,
            c_in,
            t_out,
            c_out,
        } => {
            let (stride, batch, t_in, c_in, t_out, c_out) = (*stride, *batch, *t_in, *c_in, *t_out, *c_out);
            let window = kernel * c_in;
            let xv = val(*x);
            let wv = val(*w);
            if let Some(gb) = slot(nodes, grads, *b) {
                for row in gy.chunks(c_out) {
                    gb.iter_mut().zip(row).for_each(|(o, &g)| *o = *o + g);
                }
            }
            let win = Layout { rs: stride * c_in, cs: 1 };
            if let Some(gw) = slot(nodes, grads, *w) {
                for bi in 0..batch {
                    gemm_acc(
                        (window, t_out, c_out),
                        &xv[bi * t_in * c_in..(bi + 1) * t_in * c_in],
                        Layout { rs: win.cs, cs: win.rs },
                        &gy[bi * t_out * c_out..(bi + 1) * t_out * c_out],
                        Layout::rows(c_out),
                        gw,
                        Layout::rows(c_out),
                    );
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                // gradients of overlapping windows go through a buffer
                let overlap = stride * c_in < window;
                let mut buf = if overlap { vec![F::zero(); t_out * window] } else { Vec::new() };
                for bi in 0..batch {
                    let gyb = &gy[bi * t_out * c_out..(bi + 1) * t_out * c_out];
                    let gxb = &mut gx[bi * t_in * c_in..(bi + 1) * t_in * c_in];
                    let wt = Layout::transposed(c_out);
                    if !overlap {
                        gemm_acc((t_out, c_out, window), gyb, Layout::rows(c_out), wv, wt, gxb, win);
                        continue;
                    }
                    buf.iter_mut().for_each(|v| *v = F::zero());
                    gemm_acc((t_out, c_out, window), gyb, Layout::rows(c_out), wv, wt, &mut buf, Layout::rows(window));
                    for (t, row) in buf.chunks(window).enumerate() {
                        let dst = &mut gxb[t * stride * c_in..t * stride * c_in + window];
                        dst.iter_mut().zip(row).for_each(|(o, &g)| *o = *o + g);
                    }
                }
            }
        }
        Op::LayerNorm { a, axis, inv_std } => {
            let (outer, n, inner) = axis_split(node.value.shape(), *axis);
            let nf = F::from_usize(n).unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let mean_g = (0..n).map(|i| gy[idx(i)]).sum::<F>() / nf;
                        let mean_gy = (0..n).map(|i| gy[idx(i)] * y[idx(i)]).sum::<F>() / nf;
                        let r = inv_std[o * inner + j];
                        for i in 0..n {
                            let k = idx(i);
                            ga[k] = ga[k] + r * (gy[k] - mean_g - y[k] * mean_gy);
                        }
                    }
                }
            }
        }
        Op::Gelu { a } => {
            let av = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((o, &g), &x) in ga.iter_mut().zip(gy).zip(av) {
                    *o = *o + g * gelu_grad(x);
                }
            }
        }
        Op::Relu { a } => {
            let av = val(*a);
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((o, &g), &x) in ga.iter_mut().zip(gy).zip(av) {
                    if x > F::zero() {
                        *o = *o + g;
                    }
                }
            }
        }
        Op::Sigmoid { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((o, &g), &s) in ga.iter_mut().zip(gy).zip(y) {
                    *o = *o + g * s * (F::one() - s);
                }
            }
        }
        Op::Tanh { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((o, &g), &t) in ga.iter_mut().zip(gy).zip(y) {
                    *o = *o + g * (F::one() - t * t);
                }
            }
        }
        Op::Softmax { a, axis } | Op::LogSoftmax { a, axis } => {
            let log = matches!(node.op, Op::LogSoftmax { .. });
            let (outer, n, inner) = axis_split(node.value.shape(), *axis);
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        if log {
                            let sg: F = (0..n).map(|i| gy[idx(i)]).sum();
                            for i in 0..n {
                                let k = idx(i);
                                ga[k] = ga[k] + gy[k] - y[k].exp() * sg;
                            }
                        } else {
                            let dot: F = (0..n).map(|i| gy[idx(i)] * y[idx(i)]).sum();
                            for i in 0..n {
                                let k = idx(i);
                                ga[k] = ga[k] + y[k] * (gy[k] - dot);
                            }
                        }
                    }
                }
            }
        }
        Op::Dropout { a, mask } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((o, &g), &m) in ga.iter_mut().zip(gy).zip(mask) {
                    *o = *o + g * m;
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = nodes[table.0].value.shape()[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&gy[r * d..(r + 1) * d])
                        .for_each(|(o, &g)| *o = *o + g);
                }
            }
        }
        Op::NormalizeRows { a, norms } => {
            let d = *node.value.shape().last().unwrap_or(&1);
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, &norm) in norms.iter().enumerate() {
                    if norm <= F::lit(1e-12) {
                        continue;
                    }
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gy[r * d..(r + 1) * d];
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..d {
                        ga[r * d + c] = ga[r * d + c] + (gr[c] - yr[c] * dot) / norm;
                    }
                }
            }
        }
        Op::ReplaceRows { a, row, rows } => {
            let d = *node.value.shape().last().unwrap_or(&1);
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, &m) in rows.iter().enumerate() {
                    if !m {
                        for c in 0..d {
                            ga[r * d + c] = ga[r * d + c] + gy[r * d + c];
                        }
                    }
                }
            }
            if let Some(gr) = slot(nodes, grads, *row) {
                for (r, &m) in rows.iter().enumerate() {
                    if m {
                        for c in 0..d {
                            gr[c] = gr[c] + gy[r * d + c];
                        }
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let k = *nodes[logits.0].value.shape().last().unwrap_or(&1);
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (r, &w) in weights.iter().enumerate() {
                    if w == F::zero() {
                        continue;
                    }
                    let s = gy[0] * w;
                    for c in 0..k {
                        let onehot = if c == targets[r] { F::one() } else { F::zero() };
                        gl[r * k + c] = gl[r * k + c] + s * (probs[r * k + c] - onehot);
                    }
                }
            }
        }
        Op::Mse {
            pred,
            target,
            weights,
        } => {
            let p = val(*pred);
            let d = p.len() / weights.len();
            if let Some(gp) = slot(nodes, grads, *pred) {
                for (j, o) in gp.iter_mut().enumerate() {
                    let w = weights[j / d];
                    if w != F::zero() {
                        *o = *o + gy[0] * w * F::lit(2.0) * (p[j] - target[j]);
                    }
                }
            }
        }
        Op::SmoothL1 {
            pred,
            target,
            beta,
            weights,
        } => {
            let p = val(*pred);
            let d = p.len() / weights.len();
            if let Some(gp) = slot(nodes, grads, *pred) {
                for (j, o) in gp.iter_mut().enumerate() {
                    let w = weights[j / d];
                    if w == F::zero() {
                        continue;
                    }
                    let diff = p[j] - target[j];
                    let dl = if diff.abs() < *beta {
                        diff / *beta
                    } else {
                        diff.signum()
                    };
                    *o = *o + gy[0] * w * dl;
                }
            }
        }
        Op::BceWithLogits {
            logits,
            target,
            weights,
        } => {
            let x = val(*logits);
            let d = x.len() / weights.len();
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (j, o) in gl.iter_mut().enumerate() {
                    let w = weights[j / d];
                    if w != F::zero() {
                        *o = *o + gy[0] * w * (sigmoid(x[j]) - target[j]);
                    }
                }
            }
        }
    }
}
