//! Tape-style reverse-mode differentiation over dense [`Tensor`]s.
//!
//! A [`Graph`] records every operator application as a node holding its
//! forward value. Nodes are appended in evaluation order, so walking the
//! tape backwards visits each node after all of its consumers, which is all
//! the chain rule needs. Parameters live outside the graph in a
//! [`ParamRegistry`]; [`Graph::backward`] accumulates into their gradient
//! buffers.
//!
//! Shape conventions: operators see a tensor as a matrix whose column count
//! is the last axis and whose row count folds every other axis. A 1-D tensor
//! is therefore a single row.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use crate::error::{ensure, Error, Result};
use crate::math;
use crate::params::{ParamId, ParamRegistry};
use crate::tensor::Tensor;

/// Bounds applied to `exp` arguments before evaluation.
pub const EXP_CLAMP: f64 = 50.0;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    Gather { param: ParamId, rows: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Map(Var, Vec<f64>),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Pick(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Variable => "variable",
            Op::Param(_) => "param",
            Op::Gather { .. } => "gather",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScaleBy(..) => "scale_by",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Clamp(..) => "clamp",
            Op::Map(..) => "map",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Pick(..) => "pick",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of the root with respect to [`Graph::variable`] leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.iter().find(|(w, _)| *w == v).map(|(_, t)| t)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<&'static str>,
}

fn row_broadcast_ok(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() || b.len() == a.cols() || b.len() == 1
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    /// First operator that produced a non-finite value, if any.
    pub fn fault(&self) -> Option<&'static str> {
        self.fault
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.fault {
            Some(op) => Err(Error::Numeric { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(op.name());
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&a| f(a)).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    // ── leaves ─────────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Variable, true)
    }

    pub fn param(&mut self, reg: &ParamRegistry, id: ParamId) -> Var {
        self.push(reg.value(id).clone(), Op::Param(id), true)
    }

    /// Rows of a 2-D parameter, as a `[rows.len(), cols]` tensor. Repeated
    /// indices are allowed; their gradients add up.
    pub fn gather(&mut self, reg: &ParamRegistry, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = reg.value(id);
        let n = table.rows();
        ensure!(!rows.is_empty(), "gather needs at least one index");
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::contract(alloc::format!(
                "index {bad} out of range for `{}` with {n} rows",
                reg.get(id).name
            )));
        }
        let c = table.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(table.row(r));
        }
        let value = Tensor::from_parts(vec![rows.len(), c], data);
        Ok(self.push(value, Op::Gather { param: id, rows: rows.to_vec() }, true))
    }

    // ── linear algebra ─────────────────────────────────────────────────

    /// `a · b` with `b` a `[k, n]` matrix; `a`'s last axis must be `k`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-D, got {:?}", bv.shape());
        let (m, k) = (av.rows(), av.cols());
        let n = bv.cols();
        assert_eq!(k, bv.rows(), "matmul {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`, giving `[m, n]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (av.rows(), av.cols());
        let n = bv.rows();
        assert_eq!(k, bv.cols(), "matmul_t {:?} x {:?}ᵀ", av.shape(), bv.shape());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ar = av.row(i);
            for j in 0..n {
                out.push(ar.iter().zip(bv.row(j)).map(|(x, y)| x * y).sum());
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x), ng)
    }

    // ── elementwise ────────────────────────────────────────────────────

    /// `a + b`, where `b` has `a`'s shape, is a single row broadcast over
    /// `a`'s rows, or is a single value.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_binary(a, b, 1.0)
    }

    /// `a - b` with the same broadcasting rules as [`Graph::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_binary(a, b, -1.0)
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, sign: f64) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(row_broadcast_ok(av, bv), "cannot broadcast {:?} onto {:?}", bv.shape(), av.shape());
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + sign * bv.data()[i % bl])
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let op = if sign > 0.0 { Op::Add(a, b) } else { Op::Sub(a, b) };
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    /// Elementwise product, with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(row_broadcast_ok(av, bv), "cannot broadcast {:?} onto {:?}", bv.shape(), av.shape());
        let bl = bv.len();
        let data = av.data().iter().enumerate().map(|(i, x)| x * bv.data()[i % bl]).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `x * s` where `s` holds exactly one value.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let sv = &self.nodes[s.0].value;
        assert_eq!(sv.len(), 1, "scale_by needs a single-value factor");
        let k = sv.item();
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|v| v * k).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let ng = self.needs(x) || self.needs(s);
        self.push(value, Op::ScaleBy(x, s), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Shift(x), |v| v + c)
    }

    /// ReLU; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    /// `exp` of the argument clamped to `[-EXP_CLAMP, EXP_CLAMP]`.
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| math::exp(v.clamp(-EXP_CLAMP, EXP_CLAMP)))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), math::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi);
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var {
        let deriv = self.nodes[x.0].value.data().iter().map(|&v| df(v)).collect();
        self.unary(x, Op::Map(x, deriv), f)
    }

    /// Multiplies by a fresh inverted-dropout mask. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout rate must lie in [0, 1)");
        if p == 0.0 {
            return x;
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        let keep = 1.0 / (1.0 - p);
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.constant(Tensor::from_parts(shape, mask));
        self.mul(x, m)
    }

    // ── row-wise ───────────────────────────────────────────────────────

    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| math::exp(v - max)));
            let z: f64 = out[start..start + c].iter().sum();
            out[start..].iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.needs(x);
        self.push(value, Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|&v| math::exp(v - max)).sum::<f64>());
            out.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.needs(x);
        self.push(value, Op::LogSoftmax(x), ng)
    }

    /// Row-wise standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_stds = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / math::sqrt(var + eps);
            out.extend(row.iter().map(|v| (v - mean) * inv));
            inv_stds.push(inv);
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let ng = self.needs(x);
        self.push(value, Op::LayerNorm(x, inv_stds), ng)
    }

    // ── structural ─────────────────────────────────────────────────────

    /// Concatenates along the last axis. All inputs need the same row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rows = self.nodes[xs[0].0].value.rows();
        let all_1d = xs.iter().all(|x| self.nodes[x.0].value.shape().len() == 1);
        let total: usize = xs
            .iter()
            .map(|x| {
                let v = &self.nodes[x.0].value;
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                v.cols()
            })
            .sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for x in xs {
                out.extend_from_slice(self.nodes[x.0].value.row(r));
            }
        }
        let shape = if all_1d { vec![total] } else { vec![rows, total] };
        let ng = xs.iter().any(|&x| self.needs(x));
        self.push(Tensor::from_parts(shape, out), Op::ConcatCols(xs.to_vec()), ng)
    }

    /// Stacks along the first axis. All inputs need the same column count.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let cols = self.nodes[xs[0].0].value.cols();
        let mut out = Vec::new();
        for x in xs {
            let v = &self.nodes[x.0].value;
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            out.extend_from_slice(v.data());
        }
        let rows = out.len() / cols;
        let ng = xs.iter().any(|&x| self.needs(x));
        self.push(Tensor::from_parts(vec![rows, cols], out), Op::ConcatRows(xs.to_vec()), ng)
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert!(start < end && end <= xv.cols(), "slice_cols {start}..{end} of {:?}", xv.shape());
        let mut out = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let ng = self.needs(x);
        self.push(Tensor::from_parts(shape, out), Op::SliceCols(x, start), ng)
    }

    /// Rows `start..end`, as a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert!(start < end && end <= xv.rows(), "slice_rows {start}..{end} of {:?}", xv.shape());
        let c = xv.cols();
        let out = xv.data()[start * c..end * c].to_vec();
        let ng = self.needs(x);
        self.push(Tensor::from_parts(vec![end - start, c], out), Op::SliceRows(x, start), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.nodes[x.0].value.clone().reshaped(shape);
        let ng = self.needs(x);
        self.push(value, Op::Reshape(x), ng)
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.sum() / v.len() as f64;
        let ng = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// The single entry at flat index `i`, as a scalar.
    pub fn pick(&mut self, x: Var, i: usize) -> Var {
        let v = self.nodes[x.0].value.data()[i];
        let ng = self.needs(x);
        self.push(Tensor::scalar(v), Op::Pick(x, i), ng)
    }

    /// Negative log-probability of `target` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.nodes[logits.0].value.len();
        ensure!(target < n, "target {target} out of range for {n} classes");
        let lp = self.log_softmax(logits);
        let picked = self.pick(lp, target);
        Ok(self.scale(picked, -1.0))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Propagates `d root / d ·` to every reachable parameter, adding into the
    /// registry's gradient buffers, and returns gradients for
    /// [`Graph::variable`] leaves.
    pub fn backward(&self, root: Var, reg: &mut ParamRegistry) -> Result<Gradients> {
        ensure!(
            self.nodes[root.0].value.len() == 1,
            "backward root must be a scalar, got shape {:?}",
            self.nodes[root.0].value.shape()
        );
        self.check_finite()?;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric { op: node.op.name() });
            }
            self.backprop_node(node, i, g, &mut grads, reg, &mut out);
        }
        out.grads.reverse();
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        index: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        reg: &mut ParamRegistry,
        out: &mut Gradients,
    ) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        let y = &node.value;

        match &node.op {
            Op::Constant => {}
            Op::Variable => {
                out.grads.push((Var(index), Tensor::from_parts(y.shape().to_vec(), g)));
            }
            Op::Param(id) => reg.accumulate(*id, |buf| {
                buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x);
            }),
            Op::Gather { param, rows } => {
                let c = y.cols();
                reg.accumulate(*param, |buf| {
                    for (r, &row) in rows.iter().enumerate() {
                        let dst = &mut buf[row * c..(row + 1) * c];
                        dst.iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(b, x)| *b += x);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &mut |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = bv.row(p);
                            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let dst = &mut db[p * n..(p + 1) * n];
                            dst.iter_mut().zip(grow).for_each(|(d, x)| *d += aip * x);
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            let brow = bv.row(j);
                            da[i * k..(i + 1) * k].iter_mut().zip(brow).for_each(|(d, x)| *d += gij * x);
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..m {
                        let arow = av.row(i);
                        for j in 0..n {
                            let gij = g[i * n + j];
                            db[j * k..(j + 1) * k].iter_mut().zip(arow).for_each(|(d, x)| *d += gij * x);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Add(..)) { 1.0 } else { -1.0 };
                acc(*a, &mut |da| da.iter_mut().zip(&g).for_each(|(d, x)| *d += x));
                let bl = val(*b).len();
                acc(*b, &mut |db| {
                    for (i, x) in g.iter().enumerate() {
                        db[i % bl] += sign * x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let bl = bv.len();
                acc(*a, &mut |da| {
                    for (i, (d, x)) in da.iter_mut().zip(&g).enumerate() {
                        *d += x * bv.data()[i % bl];
                    }
                });
                acc(*b, &mut |db| {
                    for (i, (x, aa)) in g.iter().zip(av.data()).enumerate() {
                        db[i % bl] += x * aa;
                    }
                });
            }
            Op::ScaleBy(x, s) => {
                let k = val(*s).item();
                let xv = val(*x);
                acc(*x, &mut |dx| dx.iter_mut().zip(&g).for_each(|(d, v)| *d += v * k));
                acc(*s, &mut |ds| ds[0] += g.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>());
            }
            Op::Scale(x, c) => acc(*x, &mut |dx| dx.iter_mut().zip(&g).for_each(|(d, v)| *d += c * v)),
            Op::Shift(x) | Op::Reshape(x) => {
                acc(*x, &mut |dx| dx.iter_mut().zip(&g).for_each(|(d, v)| *d += v))
            }
            Op::Relu(x) => {
                let xv = val(*x);
                acc(*x, &mut |dx| {
                    for ((d, v), &a) in dx.iter_mut().zip(&g).zip(xv.data()) {
                        if a > 0.0 {
                            *d += v;
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let xv = val(*x);
                acc(*x, &mut |dx| {
                    for (((d, v), &a), &e) in dx.iter_mut().zip(&g).zip(xv.data()).zip(y.data()) {
                        if (-EXP_CLAMP..=EXP_CLAMP).contains(&a) {
                            *d += v * e;
                        }
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |dx| {
                    for ((d, v), &a) in dx.iter_mut().zip(&g).zip(xv.data()) {
                        *d += v / a;
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                acc(*x, &mut |dx| {
                    for ((d, v), &a) in dx.iter_mut().zip(&g).zip(xv.data()) {
                        *d += 2.0 * a * v;
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                acc(*x, &mut |dx| {
                    for ((d, v), &a) in dx.iter_mut().zip(&g).zip(xv.data()) {
                        if a >= *lo && a <= *hi {
                            *d += v;
                        }
                    }
                });
            }
            Op::Map(x, deriv) => acc(*x, &mut |dx| {
                for ((d, v), dd) in dx.iter_mut().zip(&g).zip(deriv) {
                    *d += v * dd;
                }
            }),
            Op::Softmax(x) => {
                let c = y.cols();
                acc(*x, &mut |dx| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = y.cols();
                acc(*x, &mut |dx| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let gs: f64 = gr.iter().sum();
                        for j in 0..c {
                            dx[r * c + j] += gr[j] - math::exp(yr[j]) * gs;
                        }
                    }
                });
            }
            Op::LayerNorm(x, inv_stds) => {
                let c = y.cols();
                acc(*x, &mut |dx| {
                    for (r, &inv) in inv_stds.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let gm = gr.iter().sum::<f64>() / c as f64;
                        let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[r * c + j] += inv * (gr[j] - gm - yr[j] * gym);
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = y.cols();
                let mut offset = 0;
                for &x in xs {
                    let c = val(x).cols();
                    acc(x, &mut |dx| {
                        for r in 0..y.rows() {
                            let src = &g[r * total + offset..r * total + offset + c];
                            dx[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = val(x).len();
                    acc(x, &mut |dx| {
                        dx.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, v)| *d += v)
                    });
                    offset += n;
                }
            }
            Op::SliceCols(x, start) => {
                let full = val(*x).cols();
                let c = y.cols();
                acc(*x, &mut |dx| {
                    for r in 0..y.rows() {
                        let dst = &mut dx[r * full + start..r * full + start + c];
                        dst.iter_mut().zip(&g[r * c..(r + 1) * c]).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let c = y.cols();
                acc(*x, &mut |dx| {
                    let dst = &mut dx[start * c..start * c + g.len()];
                    dst.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Pick(x, i) => acc(*x, &mut |dx| dx[*i] += g[0]),
        }
    }
}
