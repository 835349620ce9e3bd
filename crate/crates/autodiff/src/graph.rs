use std::collections::HashMap;

use crate::error::{arg_err, shape_err, AutodiffError, Result};
use crate::gemm::{gemm_acc, Layout};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{axis_split, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<F> {
    pub value: Tensor<F>,
    pub op: Op<F>,
    pub requires_grad: bool,
    pub param: Option<ParamId>,
}

pub(crate) enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: F },
    AddScalar { a: Var },
    Transpose { a: Var, batch: usize, rows: usize, cols: usize },
    Reshape { a: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize, len: usize },
    SumAxis { a: Var, axis: usize, mean: bool },
    SumAll { a: Var, mean: bool },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        kernel: usize,
        batch: usize,
        t_in: usize,
        c_in: usize,
        t_out: usize,
        c_out: usize,
    },
    LayerNorm { a: Var, axis: usize, inv_std: Vec<F> },
    Gelu { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    Dropout { a: Var, mask: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    NormalizeRows { a: Var, norms: Vec<F> },
    ReplaceRows { a: Var, row: Var, rows: Vec<bool> },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    Mse { pred: Var, target: Vec<F>, weights: Vec<F> },
    SmoothL1 {
        pred: Var,
        target: Vec<F>,
        beta: F,
        weights: Vec<F>,
    },
    BceWithLogits {
        logits: Var,
        target: Vec<F>,
        weights: Vec<F>,
    },
}

impl<F> Op<F> {
    pub(crate) fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } => vec![*a, *b],
            Scale { a, .. }
            | AddScalar { a }
            | Transpose { a, .. }
            | Reshape { a }
            | Slice { a, .. }
            | SumAxis { a, .. }
            | SumAll { a, .. }
            | LayerNorm { a, .. }
            | Gelu { a }
            | Relu { a }
            | Sigmoid { a }
            | Tanh { a }
            | Softmax { a, .. }
            | LogSoftmax { a, .. }
            | Dropout { a, .. }
            | NormalizeRows { a, .. } => vec![*a],
            Concat { inputs, .. } => inputs.clone(),
            Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Embedding { table, .. } => vec![*table],
            ReplaceRows { a, row, .. } => vec![*a, *row],
            CrossEntropy { logits, .. } | BceWithLogits { logits, .. } => vec![*logits],
            Mse { pred, .. } | SmoothL1 { pred, .. } => vec![*pred],
        }
    }
}

/// A single-use tape. Build the forward pass with the op methods, call
/// [`Graph::backward`] once on a scalar, then read gradients.
pub struct Graph<F: Real> {
    pub(crate) nodes: Vec<Node<F>>,
    pub(crate) grads: Vec<Option<Vec<F>>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
    training: bool,
    seed: u64,
    step: u64,
    backward_done: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
            training: true,
            seed: 0,
            step: 0,
            backward_done: false,
        }
    }

    /// Graph for inference: parameters are loaded without gradients and
    /// dropout is disabled.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.grad_enabled = false;
        g.training = false;
        g
    }

    /// Sets the (seed, step) pair that dropout masks are derived from.
    pub fn with_rng(mut self, seed: u64, step: u64) -> Self {
        self.seed = seed;
        self.step = step;
        self
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>, name: &'static str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push_leaf(value, false)
    }

    /// Leaf that receives a gradient (readable through [`Graph::grad`]).
    pub fn input(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push_leaf(value, self.grad_enabled)
    }

    /// Loads a parameter onto the tape. Loading the same parameter twice
    /// returns the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let v = self.push_leaf(store.value(id).clone(), self.grad_enabled)?;
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn param_by_name(&mut self, store: &ParamStore<F>, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        self.param(store, id)
    }

    // ---- linear algebra -------------------------------------------------

    /// `[.., m, k] x [k, n]` (shared right operand) or `[b.., m, k] x [b.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", format!("{sa:?} x {sb:?}: operands need rank >= 2"));
        }
        let k = sa[sa.len() - 1];
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return shape_err("matmul", format!("{sa:?} x {sb:?}: inner dims differ"));
        }
        let shared_rhs = sb.len() == 2;
        let (batch, m) = if shared_rhs {
            (1, sa[..sa.len() - 1].iter().product::<usize>())
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return shape_err("matmul", format!("{sa:?} x {sb:?}: batch dims differ"));
            }
            (sa[..sa.len() - 2].iter().product(), sa[sa.len() - 2])
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![F::zero(); batch * m * n];
        for bi in 0..batch {
            let a_off = bi * m * k;
            let b_off = if shared_rhs { 0 } else { bi * k * n };
            let o_off = bi * m * n;
            gemm_acc(
                (m, k, n),
                &av[a_off..a_off + m * k],
                Layout::rows(k),
                &bv[b_off..b_off + k * n],
                Layout::rows(n),
                &mut out[o_off..o_off + m * n],
                Layout::rows(n),
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(&shape, out)?;
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            "matmul",
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return shape_err("transpose", format!("{s:?}: rank < 2"));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[off + c * rows + r] = src[off + r * cols + c];
                }
            }
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Transpose {
                a,
                batch,
                rows,
                cols,
            },
            "transpose",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push(value, Op::Reshape { a }, "reshape")
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err(op, format!("{sa:?} with {sb:?}: rhs must equal or be a suffix of lhs"));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        self.broadcast_check(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        self.push(value, op, name)
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale { a, s }, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Result<Var> {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar { a }, "add_scalar")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu_fwd);
        self.push(value, Op::Gelu { a }, "gelu")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(F::zero()));
        self.push(value, Op::Relu { a }, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid { a }, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.tanh());
        self.push(value, Op::Tanh { a }, "tanh")
    }

    /// Inverted dropout. Identity when not training or `p == 0`. The mask is
    /// a pure function of (graph seed, step, node index, element index).
    pub fn dropout(&mut self, a: Var, p: F) -> Result<Var> {
        if !(p >= F::zero() && p < F::one()) {
            return arg_err("dropout", format!("p = {p} outside [0, 1)"));
        }
        if !self.training || p == F::zero() {
            return Ok(a);
        }
        let op_id = self.nodes.len() as u64;
        let stream = mix64(self.seed ^ mix64(op_id.wrapping_add(0x9E37_79B9)) ^ mix64(self.step.wrapping_mul(0xA24B_AED4_963E_E407)));
        let keep_scale = F::one() / (F::one() - p);
        let p64 = p.to_f64().unwrap_or(0.0);
        let src = self.value(a);
        let mask: Vec<F> = (0..src.numel())
            .map(|i| {
                let u = (mix64(stream.wrapping_add(i as u64)) >> 11) as f64 / (1u64 << 53) as f64;
                if u < p64 {
                    F::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Tensor::new(src.shape(), data)?;
        self.push(value, Op::Dropout { a, mask }, "dropout")
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return arg_err("concat", "no inputs");
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return arg_err("concat", format!("axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return shape_err("concat", format!("{first:?} vs {s:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            "concat",
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(
            Tensor::new(&shape, out)?,
            Op::Slice {
                a,
                axis,
                start,
                len,
            },
            "slice",
        )
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return arg_err("sum_axis", format!("axis {axis} out of range for {s:?}"));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + x;
                }
            }
        }
        if mean {
            let inv = F::one() / F::from_usize(n).unwrap();
            out.iter_mut().for_each(|x| *x = *x * inv);
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(
            Tensor::new(&shape, out)?,
            Op::SumAxis { a, axis, mean },
            if mean { "mean_axis" } else { "sum_axis" },
        )
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a, mean: false }, "sum_all")
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: F = t.data().iter().copied().sum::<F>() / F::from_usize(t.numel()).unwrap();
        self.push(Tensor::scalar(s), Op::SumAll { a, mean: true }, "mean_all")
    }

    // ---- neural network primitives --------------------------------------

    /// Strided 1-D convolution over time-major input `[batch.., t, c_in]`
    /// with weight `[kernel, c_in, c_out]` and bias `[c_out]`. No padding:
    /// `t_out = (t - kernel) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if stride == 0 {
            return arg_err("conv1d", "stride must be >= 1");
        }
        if sx.len() < 2 || sw.len() != 3 {
            return shape_err("conv1d", format!("input {sx:?}, weight {sw:?}"));
        }
        let (kernel, c_in, c_out) = (sw[0], sw[1], sw[2]);
        let t_in = sx[sx.len() - 2];
        if sx[sx.len() - 1] != c_in || sb != [c_out] {
            return shape_err("conv1d", format!("input {sx:?}, weight {sw:?}, bias {sb:?}"));
        }
        if t_in < kernel {
            return shape_err("conv1d", format!("input length {t_in} shorter than kernel {kernel}"));
        }
        let t_out = (t_in - kernel) / stride + 1;
        let batch: usize = sx[..sx.len() - 2].iter().product();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let window = kernel * c_in;
        let mut out = vec![F::zero(); batch * t_out * c_out];
        for bi in 0..batch {
            let xb = &xv[bi * t_in * c_in..(bi + 1) * t_in * c_in];
            let ob = &mut out[bi * t_out * c_out..(bi + 1) * t_out * c_out];
            ob.chunks_mut(c_out).for_each(|row| row.copy_from_slice(bv));
            // windows are overlapping rows of x, `stride * c_in` apart
            gemm_acc(
                (t_out, window, c_out),
                xb,
                Layout { rs: stride * c_in, cs: 1 },
                wv,
                Layout::rows(c_out),
                ob,
                Layout::rows(c_out),
            );
        }
        let mut shape = sx.clone();
        let l = shape.len();
        shape[l - 2] = t_out;
        shape[l - 1] = c_out;
        self.push(
            Tensor::new(&shape, out)?,
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
            },
            "conv1d",
        )
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: F) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return arg_err("layer_norm", format!("axis {axis} out of range for {s:?}"));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        let mut inv_std = vec![F::zero(); outer * inner];
        let nf = F::from_usize(n).unwrap();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mean = (0..n).map(|i| src[idx(i)]).sum::<F>() / nf;
                let var = (0..n)
                    .map(|i| {
                        let d = src[idx(i)] - mean;
                        d * d
                    })
                    .sum::<F>()
                    / nf;
                let r = F::one() / (var + eps).sqrt();
                inv_std[o * inner + j] = r;
                for i in 0..n {
                    out[idx(i)] = (src[idx(i)] - mean) * r;
                }
            }
        }
        self.push(
            Tensor::new(&s, out)?,
            Op::LayerNorm { a, axis, inv_std },
            "layer_norm",
        )
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return arg_err("softmax", format!("axis {axis} out of range for {s:?}"));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mx = (0..n).map(|i| src[idx(i)]).fold(F::neg_infinity(), F::max);
                let z: F = (0..n).map(|i| (src[idx(i)] - mx).exp()).sum();
                let lz = z.ln();
                for i in 0..n {
                    let shifted = src[idx(i)] - mx;
                    out[idx(i)] = if log { shifted - lz } else { shifted.exp() / z };
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        if log {
            self.push(value, Op::LogSoftmax { a, axis }, "log_softmax")
        } else {
            self.push(value, Op::Softmax { a, axis }, "softmax")
        }
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    /// Gathers rows of `table` (`[vocab, dim]`) into `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return shape_err("embedding", format!("table {s:?} must be 2-D"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return arg_err("embedding", format!("id {bad} >= vocab {}", s[0]));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * s[1]);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        self.push(
            Tensor::new(&[ids.len(), s[1]], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Scales each row (last axis) to unit L2 norm. Rows with zero norm map
    /// to zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap_or(&1);
        let src = self.value(a).data();
        let rows = src.len() / d.max(1);
        let mut out = vec![F::zero(); src.len()];
        let mut norms = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let norm = row.iter().map(|&x| x * x).sum::<F>().sqrt();
            norms[r] = norm;
            if norm > F::lit(1e-12) {
                for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *o = x / norm;
                }
            }
        }
        self.push(
            Tensor::new(&s, out)?,
            Op::NormalizeRows { a, norms },
            "normalize_rows",
        )
    }

    /// Replaces rows of `a` (viewed as `[rows, d]`) where `rows[i]` is set
    /// with the vector `row` (`[d]`).
    pub fn replace_rows(&mut self, a: Var, row: Var, rows: &[bool]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().unwrap_or(&1);
        if self.shape(row) != [d] {
            return shape_err("replace_rows", format!("row {:?} vs width {d}", self.shape(row)));
        }
        let n = self.value(a).numel() / d;
        if rows.len() != n {
            return shape_err("replace_rows", format!("mask length {} vs {n} rows", rows.len()));
        }
        let mut out = self.value(a).data().to_vec();
        let rv = self.value(row).data().to_vec();
        for (i, _) in rows.iter().enumerate().filter(|(_, &m)| m) {
            out[i * d..(i + 1) * d].copy_from_slice(&rv);
        }
        self.push(
            Tensor::new(&s, out)?,
            Op::ReplaceRows {
                a,
                row,
                rows: rows.to_vec(),
            },
            "replace_rows",
        )
    }

    // ---- losses ---------------------------------------------------------

    fn row_weights(op: &'static str, mask: &[bool], per_row: usize) -> Result<Vec<F>> {
        let n_sel = mask.iter().filter(|&&m| m).count();
        if n_sel == 0 {
            return Err(AutodiffError::EmptyMask { op });
        }
        let w = F::one() / F::from_usize(n_sel * per_row).unwrap();
        Ok(mask
            .iter()
            .map(|&m| if m { w } else { F::zero() })
            .collect())
    }

    /// Mean cross-entropy over the rows of `logits` (`[n, k]`) selected by
    /// `mask`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let k = *s.last().unwrap_or(&1);
        let n = self.value(logits).numel() / k;
        if targets.len() != n || mask.len() != n {
            return shape_err(
                "cross_entropy",
                format!("{n} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            );
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= k) {
            return arg_err("cross_entropy", format!("target {bad} >= {k} classes"));
        }
        let weights = Self::row_weights("cross_entropy", mask, 1)?;
        let src = self.value(logits).data();
        let mut probs = vec![F::zero(); n * k];
        let mut loss = F::zero();
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            let row = &src[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&x| (x - mx).exp()).sum();
            for (p, &x) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (x - mx).exp() / z;
            }
            loss = loss + weights[r] * (z.ln() + mx - row[targets[r]]);
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            "cross_entropy",
        )
    }

    fn check_target(&self, op: &'static str, pred: Var, target: &Tensor<F>, mask: &[bool]) -> Result<usize> {
        let s = self.shape(pred);
        if s != target.shape() {
            return shape_err(op, format!("pred {s:?} vs target {:?}", target.shape()));
        }
        let d = *s.last().unwrap_or(&1);
        let n = target.numel() / d;
        if mask.len() != n {
            return shape_err(op, format!("mask length {} vs {n} rows", mask.len()));
        }
        Ok(d)
    }

    /// Mean squared error over the elements of the selected rows.
    pub fn mse(&mut self, pred: Var, target: &Tensor<F>, mask: &[bool]) -> Result<Var> {
        let d = self.check_target("mse", pred, target, mask)?;
        let weights = Self::row_weights("mse", mask, d)?;
        let p = self.value(pred).data();
        let mut loss = F::zero();
        for (i, (&x, &y)) in p.iter().zip(target.data()).enumerate() {
            let diff = x - y;
            loss = loss + weights[i / d] * diff * diff;
        }
        self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
                weights,
            },
            "mse",
        )
    }

    /// Huber-style smooth L1 with transition point `beta`, averaged over the
    /// elements of the selected rows.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor<F>, beta: F, mask: &[bool]) -> Result<Var> {
        if beta <= F::zero() {
            return arg_err("smooth_l1", "beta must be positive");
        }
        let d = self.check_target("smooth_l1", pred, target, mask)?;
        let weights = Self::row_weights("smooth_l1", mask, d)?;
        let p = self.value(pred).data();
        let half = F::lit(0.5);
        let mut loss = F::zero();
        for (i, (&x, &y)) in p.iter().zip(target.data()).enumerate() {
            let a = (x - y).abs();
            let l = if a < beta { half * a * a / beta } else { a - half * beta };
            loss = loss + weights[i / d] * l;
        }
        self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
                beta,
                weights,
            },
            "smooth_l1",
        )
    }

    /// Binary cross-entropy on logits, averaged over the elements of the
    /// selected rows. Targets lie in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<F>, mask: &[bool]) -> Result<Var> {
        let d = self.check_target("bce_with_logits", logits, target, mask)?;
        if target.data().iter().any(|&y| y < F::zero() || y > F::one()) {
            return arg_err("bce_with_logits", "targets must lie in [0, 1]");
        }
        let weights = Self::row_weights("bce_with_logits", mask, d)?;
        let p = self.value(logits).data();
        let mut loss = F::zero();
        for (i, (&x, &y)) in p.iter().zip(target.data()).enumerate() {
            let l = x.max(F::zero()) - x * y + (F::one() + (-x.abs()).exp()).ln();
            loss = loss + weights[i / d] * l;
        }
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
                weights,
            },
            "bce_with_logits",
        )
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires one. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NotScalar(shape));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            crate::backward::propagate(&self.nodes, i, &gy, &mut self.grads);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    /// Adds the gradients of every parameter leaf on this graph into the
    /// store's gradient buffers. Parameters absent from the graph keep
    /// their buffers unchanged.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<F>) {
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(pid), Some(Some(g))) = (node.param, self.grads.get(i)) else {
                continue;
            };
            let p = store.get_mut(pid);
            for (acc, &x) in p.grad.iter_mut().zip(g) {
                *acc = *acc + x;
            }
        }
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_fwd<F: Real>(x: F) -> F {
    let inner = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    F::lit(0.5) * x * (F::one() + inner.tanh())
}

pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let inner = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = F::lit(GELU_C) * (F::one() + F::lit(3.0 * GELU_A) * x * x);
    F::lit(0.5) * (F::one() + t) + F::lit(0.5) * x * (F::one() - t * t) * dinner
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
