//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in creation order, so node inputs
//! always precede the node itself. [`Tape::backward`] walks the record in
//! reverse and returns a fresh [`Gradients`] map each call; nothing is
//! accumulated across calls.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::nn::conv1d::{self, DilatedPadding};
use crate::nn::conv2d::{self, ConvMaskKind};
use crate::nn::{norm, position, softmax};
use crate::tensor::{numel, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        shared_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(Var),
    Reshape(Var),
    LeadingRows(Var),
    SwapAxes12 {
        x: Var,
        dims: [usize; 4],
    },
    Concat {
        a: Var,
        b: Var,
        wa: usize,
        wb: usize,
    },
    Sum(Var),
    Mean(Var),
    MeanPool {
        x: Var,
        lengths: Vec<usize>,
        t: usize,
        d: usize,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2dMaps {
        x: Var,
        kernel: Var,
        bias: Var,
        kind: ConvMaskKind,
        active: Vec<bool>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
        padding: DilatedPadding,
    },
    RelativeLogits {
        q: Var,
        table: Var,
        max_rel: usize,
    },
    WeightedSquares {
        pred: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
    Nll {
        probs: Var,
        labels: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) => vec![*a, *b],
            Scale(x, _) | MulConst(x, _) | Relu(x) | Reshape(x) | LeadingRows(x) | Sum(x) | Mean(x) => vec![*x],
            MatMul { a, b, .. } | Concat { a, b, .. } => vec![*a, *b],
            SwapAxes12 { x, .. } | MeanPool { x, .. } | Softmax { x } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Conv2dMaps { x, kernel, bias, .. } | Conv1d { x, kernel, bias, .. } => {
                vec![*x, *kernel, *bias]
            }
            RelativeLogits { q, table, .. } => vec![*q, *table],
            WeightedSquares { pred, .. } => vec![*pred],
            Nll { probs, .. } => vec![*probs],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
}

/// Ordered record of operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`'s value.
    pub fn tensor(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::from_parts(tape.shape(v).to_vec(), g.to_vec()))
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

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * factor).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(out, Op::Scale(x, factor))
    }

    /// Elementwise product with a constant (non-differentiable) factor array.
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let v = self.value(x);
        if factors.len() != v.len() {
            return Err(shape_err("mul_const", v.shape(), &[factors.len()]));
        }
        let data = v.data().iter().zip(&factors).map(|(&e, &f)| e * f).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(out, Op::MulConst(x, factors)))
    }

    /// `alpha·a + (1 − alpha)·b`.
    pub fn lerp(&mut self, a: Var, b: Var, alpha: f64) -> Result<Var> {
        let sa = self.scale(a, alpha);
        let sb = self.scale(b, 1.0 - alpha);
        self.add(sa, sb)
    }

    /// Adds `bias` broadcast over the leading dimensions of `x`; the shape
    /// of `bias` must equal the trailing dimensions of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(shape_err("add_bias", sx, sb));
        }
        let n = self.value(bias).len();
        let b = self.data(bias).to_vec();
        let v = self.value(x);
        let mut data = v.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (e, bi) in row.iter_mut().zip(&b) {
                *e += bi;
            }
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// Matrix product `a · b`.
    ///
    /// `a` is `[batch.., m, k]`. `b` is either a shared `[k, n]` matrix or
    /// carries the same leading batch dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product against a transposed right operand, `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let op = if trans_b { "matmul_t" } else { "matmul" };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err(op, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(shape_err(op, &sa, &sb));
        }
        let lead = &sa[..sa.len() - 2];
        let batch = numel(lead);
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *lead {
            return Err(shape_err(op, &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            if shared_b {
                if trans_b {
                    gemm_nt(batch * m, k, n, da, db, &mut out);
                } else {
                    gemm_nn(batch * m, k, n, da, db, &mut out);
                }
            } else {
                for bi in 0..batch {
                    let ab = &da[bi * m * k..(bi + 1) * m * k];
                    let bb = &db[bi * k * n..(bi + 1) * k * n];
                    let cb = &mut out[bi * m * n..(bi + 1) * m * n];
                    if trans_b {
                        gemm_nt(m, k, n, ab, bb, cb);
                    } else {
                        gemm_nn(m, k, n, ab, bb, cb);
                    }
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(&[m, n]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                shared_b,
                m,
                k,
                n,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e.max(0.0)).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push(out, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Swaps axes 1 and 2 of a rank-4 tensor: `(a, b, c, d) → (a, c, b, d)`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(shape_err("swap_axes12", s, &[0, 0, 0, 0]));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.data(x), dims);
        let shape = vec![dims[0], dims[2], dims[1], dims[3]];
        Ok(self.push(Tensor::from_parts(shape, out), Op::SwapAxes12 { x, dims }))
    }

    /// First `rows` entries along the leading axis.
    pub fn leading_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() || rows == 0 || rows > s[0] {
            return Err(Error::Contract(format!("cannot take {rows} leading rows of {s:?}")));
        }
        let mut shape = s.to_vec();
        shape[0] = rows;
        let data = self.data(x)[..numel(&shape)].to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::LeadingRows(x)))
    }

    /// Concatenates along the last dimension.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat_last", sa, sb));
        }
        let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = wa + wb;
        let rows = numel(&sa[..sa.len() - 1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            out.extend_from_slice(&da[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&db[r * wb..(r + 1) * wb]);
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { a, b, wa, wb }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean over the time axis of a `(B, T, d)` tensor, restricted to the
    /// first `lengths[b]` steps of each series (all `T` when `None`).
    pub fn mean_pool(&mut self, x: Var, lengths: Option<&[usize]>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(shape_err("mean_pool", s, &[0, 0, 0]));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let lengths = match lengths {
            Some(l) => {
                if l.len() != b || l.iter().any(|&n| n == 0 || n > t) {
                    return Err(Error::Contract(format!(
                        "mean_pool lengths {l:?} invalid for batch {b}, T={t}"
                    )));
                }
                l.to_vec()
            }
            None => vec![t; b],
        };
        let data = self.data(x);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let row = &mut out[bi * d..(bi + 1) * d];
            for ti in 0..lengths[bi] {
                let src = &data[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (o, v) in row.iter_mut().zip(src) {
                    *o += v;
                }
            }
            let inv = 1.0 / lengths[bi] as f64;
            row.iter_mut().for_each(|o| *o *= inv);
        }
        Ok(self.push(Tensor::from_parts(vec![b, d], out), Op::MeanPool { x, lengths, t, d }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        // Only requires_grad leaves are reported.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            } else if slot.is_none() {
                *slot = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += f * b));
            }
            Op::MulConst(x, factors) => {
                self.accumulate(grads, *x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * factors[i];
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                let n = self.value(*b).len();
                self.accumulate(grads, *b, |gb| {
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            &Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                shared_b,
                m,
                k,
                n,
            } => {
                let (va, vb) = (self.data(a), self.data(b));
                // dA = dC · B (or dC · Bᵀ)
                self.accumulate(grads, a, |ga| {
                    if shared_b {
                        if trans_b {
                            gemm_nn(batch * m, n, k, g, vb, ga);
                        } else {
                            gemm_nt(batch * m, n, k, g, vb, ga);
                        }
                    } else {
                        for bi in 0..batch {
                            let gc = &g[bi * m * n..(bi + 1) * m * n];
                            let bb = &vb[bi * k * n..(bi + 1) * k * n];
                            let gab = &mut ga[bi * m * k..(bi + 1) * m * k];
                            if trans_b {
                                gemm_nn(m, n, k, gc, bb, gab);
                            } else {
                                gemm_nt(m, n, k, gc, bb, gab);
                            }
                        }
                    }
                });
                // dB = Aᵀ · dC (or dCᵀ · A)
                self.accumulate(grads, b, |gb| {
                    if shared_b {
                        if trans_b {
                            gemm_tn(n, batch * m, k, g, va, gb);
                        } else {
                            gemm_tn(k, batch * m, n, va, g, gb);
                        }
                    } else {
                        for bi in 0..batch {
                            let gc = &g[bi * m * n..(bi + 1) * m * n];
                            let ab = &va[bi * m * k..(bi + 1) * m * k];
                            let gbb = &mut gb[bi * k * n..(bi + 1) * k * n];
                            if trans_b {
                                gemm_tn(n, m, k, gc, ab, gbb);
                            } else {
                                gemm_tn(k, m, n, ab, gc, gbb);
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let o = out.data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..g.len() {
                        if o[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |gx| add_into(gx, g)),
            Op::LeadingRows(x) => self.accumulate(grads, *x, |gx| add_into(&mut gx[..g.len()], g)),
            Op::SwapAxes12 { x, dims } => {
                let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                self.accumulate(grads, *x, |gx| add_into(gx, &back));
            }
            &Op::Concat { a, b, wa, wb } => {
                let rows = g.len() / (wa + wb);
                self.accumulate(grads, a, |ga| {
                    for r in 0..rows {
                        let src = &g[r * (wa + wb)..r * (wa + wb) + wa];
                        add_into(&mut ga[r * wa..(r + 1) * wa], src);
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for r in 0..rows {
                        let src = &g[r * (wa + wb) + wa..(r + 1) * (wa + wb)];
                        add_into(&mut gb[r * wb..(r + 1) * wb], src);
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|e| *e += s));
            }
            Op::Mean(x) => {
                let s = g[0] / self.value(*x).len() as f64;
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|e| *e += s));
            }
            Op::MeanPool { x, lengths, t, d } => {
                let (t, d) = (*t, *d);
                self.accumulate(grads, *x, |gx| {
                    for (bi, &len) in lengths.iter().enumerate() {
                        let inv = 1.0 / len as f64;
                        let gr = &g[bi * d..(bi + 1) * d];
                        for ti in 0..len {
                            let dst = &mut gx[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                            for (o, v) in dst.iter_mut().zip(gr) {
                                *o += v * inv;
                            }
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let n = out.last_dim();
                let probs = out.data();
                self.accumulate(grads, *x, |gx| softmax::backward(probs, g, n, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.data(*gamma);
                let d = gam.len();
                self.accumulate(grads, *x, |gx| norm::backward_input(xhat, inv_std, gam, g, gx));
                self.accumulate(grads, *gamma, |gg| {
                    for (row_g, row_h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_h[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for row in g.chunks_exact(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Conv2dMaps {
                x,
                kernel,
                bias,
                kind,
                active,
            } => {
                let dims = conv2d::dims(self.shape(*x));
                let gz = conv2d::relu_grad(g, active);
                let (vx, vk) = (self.data(*x), self.data(*kernel));
                self.accumulate(grads, *x, |gx| conv2d::backward_input(*kind, dims, vk, &gz, gx));
                self.accumulate(grads, *kernel, |gk| conv2d::backward_kernel(*kind, dims, vx, &gz, gk));
                self.accumulate(grads, *bias, |gb| conv2d::backward_bias(dims, &gz, gb));
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                dilation,
                padding,
            } => {
                let geom = conv1d::Geometry::new(self.shape(*x), self.shape(*kernel), *dilation, *padding);
                let (vx, vk) = (self.data(*x), self.data(*kernel));
                self.accumulate(grads, *x, |gx| conv1d::backward_input(&geom, vk, g, gx));
                self.accumulate(grads, *kernel, |gk| conv1d::backward_kernel(&geom, vx, g, gk));
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks_exact(geom.c_out) {
                        add_into(gb, row);
                    }
                });
            }
            Op::RelativeLogits { q, table, max_rel } => {
                let sq = self.shape(*q);
                let dims = [sq[0], sq[1], sq[2], sq[3]];
                let (vq, vt) = (self.data(*q), self.data(*table));
                self.accumulate(grads, *q, |gq| {
                    position::relative_backward_query(dims, *max_rel, vt, g, gq)
                });
                self.accumulate(grads, *table, |gt| {
                    position::relative_backward_table(dims, *max_rel, vq, g, gt)
                });
            }
            Op::WeightedSquares { pred, target, weight } => {
                let p = self.data(*pred);
                let s = g[0];
                self.accumulate(grads, *pred, |gp| {
                    for i in 0..p.len() {
                        if weight[i] != 0.0 {
                            gp[i] += s * 2.0 * weight[i] * (p[i] - target[i]);
                        }
                    }
                });
            }
            Op::Nll { probs, labels } => {
                let p = self.data(*probs);
                let c = self.value(*probs).last_dim();
                let s = g[0] / labels.len() as f64;
                self.accumulate(grads, *probs, |gp| {
                    for (row, &label) in labels.iter().enumerate() {
                        let pi = p[row * c + label];
                        if pi > crate::train::PROB_FLOOR {
                            gp[row * c + label] -= s / pi;
                        }
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn swap12(src: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for ia in 0..a {
        for ib in 0..b {
            for ic in 0..c {
                let s = ((ia * b + ib) * c + ic) * d;
                let t = ((ia * c + ic) * b + ib) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}
