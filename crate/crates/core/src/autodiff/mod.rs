//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every forward operation (define-by-run) and is rebuilt
//! for each forward pass. [`Var`] is a handle to a node on the tape; values
//! are read back with [`Tape::value`] and gradients come from
//! [`Tape::backward`].
//!
//! Binary elementwise ops and the batch dimensions of [`Tape::matmul`]
//! broadcast right-aligned: dimensions are compared from the last one
//! backwards and a size-1 (or missing) dimension stretches to match.

mod check;
mod kernels;
mod tensor;

pub use check::{grad_check, GradCheckOptions, GradCheckReport};
pub use tensor::Tensor;

use crate::error::{invalid, shape, Error, Result};
use kernels::{gemm_nn, gemm_nt, gemm_tn};
use tensor::{broadcast_index, broadcast_shape, strides};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Square,
    Tanh,
    Gelu,
    Exp,
    Sqrt,
    Scale(f64),
    Shift(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    // (a offset, b offset) per output batch entry
    pairs: Vec<(usize, usize)>,
}

enum Op {
    Leaf,
    Unary(Var, UnaryOp),
    Map(Var, Vec<f64>),
    Binary(Var, Var, BinaryOp, Option<Vec<usize>>, Option<Vec<usize>>),
    MatMul(Var, Var, MatMulPlan),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Reduce(Var, Reduction, Option<usize>),
    Concat(Vec<Var>, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of forward operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("{name} produced non-finite values")));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    // ---- elementwise -------------------------------------------------------

    pub fn unary(&mut self, a: Var, op: UnaryOp) -> Result<Var> {
        let x = self.value(a);
        let f: Box<dyn Fn(f64) -> f64> = match op {
            UnaryOp::Neg => Box::new(|v: f64| -v),
            UnaryOp::Square => Box::new(|v: f64| v * v),
            UnaryOp::Tanh => Box::new(f64::tanh),
            UnaryOp::Gelu => Box::new(kernels::gelu),
            UnaryOp::Exp => Box::new(f64::exp),
            UnaryOp::Sqrt => Box::new(f64::sqrt),
            UnaryOp::Scale(c) => Box::new(move |v: f64| v * c),
            UnaryOp::Shift(c) => Box::new(move |v: f64| v + c),
        };
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push("elementwise op", out, Op::Unary(a, op), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Neg)
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Square)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Tanh)
    }
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Gelu)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Exp)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, UnaryOp::Sqrt)
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, UnaryOp::Scale(c))
    }
    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, UnaryOp::Shift(c))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let deriv = x.data().iter().map(|&v| df(v)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push("map", out, Op::Map(a, deriv), &[a])
    }

    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| shape(format!("cannot broadcast {sa:?} with {sb:?} for {op:?}")))?;
        let ia = (sa != out_shape).then(|| broadcast_index(&sa, &out_shape));
        let ib = (sb != out_shape).then(|| broadcast_index(&sb, &out_shape));
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let f = |u: f64, v: f64| match op {
            BinaryOp::Add => u + v,
            BinaryOp::Sub => u - v,
            BinaryOp::Mul => u * v,
        };
        let data: Vec<f64> = match (&ia, &ib) {
            (None, None) => xa.iter().zip(xb).map(|(&u, &v)| f(u, v)).collect(),
            (None, Some(ib)) => (0..n).map(|i| f(xa[i], xb[ib[i]])).collect(),
            (Some(ia), None) => (0..n).map(|i| f(xa[ia[i]], xb[i])).collect(),
            (Some(ia), Some(ib)) => (0..n).map(|i| f(xa[ia[i]], xb[ib[i]])).collect(),
        };
        let out = Tensor::from_parts(out_shape, data);
        self.push("binary op", out, Op::Binary(a, b, op, ia, ib), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n] → [.., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape(format!("matmul needs rank ≥ 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(shape(format!("matmul inner dimensions differ: {sa:?} · {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (plan, out_shape) = if bb.is_empty() {
            // fold a's batch into rows
            let rows = ba.iter().product::<usize>() * m;
            let mut out_shape = ba.to_vec();
            out_shape.extend([m, n]);
            (MatMulPlan { m: rows, k, n, pairs: vec![(0, 0)] }, out_shape)
        } else {
            let batch = broadcast_shape(ba, bb)
                .ok_or_else(|| shape(format!("matmul batch dims {ba:?} vs {bb:?}")))?;
            let ia = broadcast_index(ba, &batch);
            let ib = broadcast_index(bb, &batch);
            let pairs = ia.iter().zip(&ib).map(|(&i, &j)| (i * m * k, j * k * n)).collect();
            let mut out_shape = batch;
            out_shape.extend([m, n]);
            (MatMulPlan { m, k, n, pairs }, out_shape)
        };
        let mut out = vec![0.0; out_shape.iter().product()];
        {
            let (xa, xb) = (self.value(a).data(), self.value(b).data());
            let (m, k, n) = (plan.m, plan.k, plan.n);
            for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
                gemm_nn(
                    &xa[oa..oa + m * k],
                    &xb[ob..ob + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let out = Tensor::from_parts(out_shape, out);
        self.push("matmul", out, Op::MatMul(a, b, plan), &[a, b])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(shape(format!("invalid permutation {axes:?} for shape {s:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&i| s[i]).collect();
        let src_strides = strides(&s);
        let eff: Vec<usize> = axes.iter().map(|&i| src_strides[i]).collect();
        let n: usize = s.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; s.len()];
        let mut cur = 0usize;
        for _ in 0..n {
            index.push(cur);
            for d in (0..s.len()).rev() {
                counter[d] += 1;
                cur += eff[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                cur -= eff[d] * counter[d];
                counter[d] = 0;
            }
        }
        self.gather(a, out_shape, index)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape("transpose needs rank ≥ 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    fn gather(&mut self, a: Var, out_shape: Vec<usize>, index: Vec<usize>) -> Result<Var> {
        let x = self.value(a).data();
        let data = index.iter().map(|&i| x[i]).collect();
        let out = Tensor::from_parts(out_shape, data);
        self.push("gather", out, Op::Gather(a, index), &[a])
    }

    /// Selects `indices` along `axis` (indices may repeat).
    pub fn select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || indices.is_empty() || indices.iter().any(|&i| i >= s[axis]) {
            return Err(shape(format!("select {indices:?} on axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * s[axis] + i) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = s;
        out_shape[axis] = indices.len();
        self.gather(a, out_shape, index)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape(format!("narrow [{start}, +{len}) on axis {axis} of {s:?}")));
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.select(a, axis, &idx)
    }

    /// Splits `a` along `axis` into pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total = self.shape(a).get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != total {
            return Err(shape(format!("split sizes {sizes:?} do not sum to {total}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(new_shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(shape(format!("concat axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape(format!("concat shape {s:?} incompatible with {s0:?}")));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = s0;
        out_shape[axis] = total;
        let out = Tensor::from_parts(out_shape, data);
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), parts)
    }

    // ---- normalization and reductions --------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(shape(format!("softmax axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    y[at(j)] /= z;
                }
            }
        }
        let out = Tensor::from_parts(s, y);
        self.push("softmax", out, Op::Softmax(a, axis), &[a])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layernorm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().ok_or_else(|| shape("layernorm of a scalar"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape(format!(
                "layernorm gain {:?} / bias {:?} must be [{d}]",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let x = self.value(a).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                y[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_parts(s, y);
        self.push("layernorm", out, Op::LayerNorm { x: a, gain, bias, xhat, inv_std }, &[a, gain, bias])
    }

    /// Reduces over `axis` (removing it), or over everything when `axis` is `None`.
    pub fn reduce(&mut self, a: Var, op: Reduction, axis: Option<usize>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let x = self.value(a).data();
        let out = match axis {
            None => {
                let total: f64 = x.iter().sum();
                let v = if op == Reduction::Mean { total / x.len() as f64 } else { total };
                Tensor::scalar(v)
            }
            Some(ax) => {
                if ax >= s.len() {
                    return Err(shape(format!("reduce axis {ax} out of range for {s:?}")));
                }
                let (outer, len, inner) = axis_split(&s, ax);
                let mut y = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (acc, v) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                if op == Reduction::Mean {
                    y.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut out_shape = s.clone();
                out_shape.remove(ax);
                Tensor::from_parts(out_shape, y)
            }
        };
        self.push("reduce", out, Op::Reduce(a, op, axis), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Reduction::Sum, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Reduction::Mean, None)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Reduction::Sum, Some(axis))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(invalid("loss is not on this tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        macro_rules! slot {
            ($v:expr) => {{
                let len = self.nodes[$v.0].value.len();
                grad_slot(grads, $v, len)
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::Unary(a, op) => {
                if !self.wants(*a) {
                    return;
                }
                let x = self.nodes[a.0].value.data();
                let y = node.value.data();
                let ga = slot!(*a);
                for i in 0..g.len() {
                    let d = match *op {
                        UnaryOp::Neg => -1.0,
                        UnaryOp::Square => 2.0 * x[i],
                        UnaryOp::Tanh => 1.0 - y[i] * y[i],
                        UnaryOp::Gelu => kernels::gelu_grad(x[i]),
                        UnaryOp::Exp => y[i],
                        UnaryOp::Sqrt => 0.5 / y[i],
                        UnaryOp::Scale(c) => c,
                        UnaryOp::Shift(_) => 1.0,
                    };
                    ga[i] += g[i] * d;
                }
            }
            Op::Map(a, deriv) => {
                if self.wants(*a) {
                    let ga = slot!(*a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * deriv[i];
                    }
                }
            }
            Op::Binary(a, b, op, ia, ib) => {
                let (xa, xb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let at = |idx: &Option<Vec<usize>>, i: usize| idx.as_ref().map_or(i, |v| v[i]);
                if self.wants(*a) {
                    let ga = slot!(*a);
                    for i in 0..g.len() {
                        let d = match op {
                            BinaryOp::Add | BinaryOp::Sub => 1.0,
                            BinaryOp::Mul => xb[at(ib, i)],
                        };
                        ga[at(ia, i)] += g[i] * d;
                    }
                }
                if self.wants(*b) {
                    let gb = slot!(*b);
                    for i in 0..g.len() {
                        let d = match op {
                            BinaryOp::Add => 1.0,
                            BinaryOp::Sub => -1.0,
                            BinaryOp::Mul => xa[at(ia, i)],
                        };
                        gb[at(ib, i)] += g[i] * d;
                    }
                }
            }
            Op::MatMul(a, b, plan) => {
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (xa, xb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                if self.wants(*a) {
                    let ga = slot!(*a);
                    for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
                        gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &xb[ob..ob + k * n],
                            &mut ga[oa..oa + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.wants(*b) {
                    let gb = slot!(*b);
                    for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
                        gemm_tn(
                            &xa[oa..oa + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[ob..ob + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Gather(a, index) => {
                if self.wants(*a) {
                    let ga = slot!(*a);
                    for (gi, &src) in g.iter().zip(index) {
                        ga[src] += gi;
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let ga = slot!(*a);
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Softmax(a, axis) => {
                if !self.wants(*a) {
                    return;
                }
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let ga = slot!(*a);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.nodes[gain.0].value.len();
                let gv = self.nodes[gain.0].value.data();
                let rows = xhat.len() / d;
                if self.wants(*x) {
                    let gx = slot!(*x);
                    let mut dh = vec![0.0; d];
                    for r in 0..rows {
                        let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        for j in 0..d {
                            dh[j] = gr[j] * gv[j];
                        }
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if self.wants(*gain) {
                    let gg = slot!(*gain);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = slot!(*bias);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Reduce(a, op, axis) => {
                if !self.wants(*a) {
                    return;
                }
                let src_shape = self.nodes[a.0].value.shape().to_vec();
                let ga = slot!(*a);
                match axis {
                    None => {
                        let v = if *op == Reduction::Mean { g[0] / ga.len() as f64 } else { g[0] };
                        ga.iter_mut().for_each(|x| *x += v);
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(&src_shape, *ax);
                        let scale = if *op == Reduction::Mean { 1.0 / len as f64 } else { 1.0 };
                        for o in 0..outer {
                            let gs = &g[o * inner..(o + 1) * inner];
                            for j in 0..len {
                                let dst = &mut ga[(o * len + j) * inner..(o * len + j + 1) * inner];
                                for (d, s) in dst.iter_mut().zip(gs) {
                                    *d += s * scale;
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis] * inner;
                    if self.wants(p) {
                        let gp = slot!(p);
                        for o in 0..outer {
                            let src = &g[o * total + off..o * total + off + len];
                            for (d, s) in gp[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    off += len;
                }
            }
        }
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axis_split(s: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = s[..axis].iter().product();
    let inner = s[axis + 1..].iter().product();
    (outer, s[axis], inner)
}
