use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use super::DiffError;

const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Exp,
    Log,
    Sqrt,
    Square,
    Sigmoid,
    Tanh,
    Relu,
    Elu,
    Clamp { lo: f64, hi: f64 },
    SoftmaxLastDim,
    LayerNormLastDim,
    Sum,
    Mean,
    Transpose,
    Reshape,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Broadcast,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Elu => "elu",
            Op::Clamp { .. } => "clamp",
            Op::SoftmaxLastDim => "softmax_lastdim",
            Op::LayerNormLastDim => "layernorm_lastdim",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Broadcast => "broadcast",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    // op-specific activations kept for the adjoint (layernorm: per-row 1/σ)
    saved: Vec<f64>,
    grad: Option<Tensor>,
}

/// Dynamic reverse-mode tape. Nodes are appended in construction order, so
/// inputs always precede their consumers and the reverse sweep is a plain
/// reverse iteration.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn ensure_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn ensure_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize), DiffError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(DiffError::Rank {
            op,
            expected: 2,
            shape: other.to_vec(),
        }),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].inputs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. a leaf, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, Vec::new(), value, requires_grad, Vec::new())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool, saved: Vec<f64>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            saved,
            grad: None,
        });
        Var(id)
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        let rg = self.nodes[a.0].requires_grad;
        self.push(op, vec![a.0], value, rg, Vec::new())
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        ensure_same(op.name(), ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(op, vec![a.0, b.0], value, rg, Vec::new()))
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ensure_rank2("matmul", ta)?;
        let (k2, n) = ensure_rank2("matmul", tb)?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a.0, b.0]);
        Ok(self.push(Op::MatMul, vec![a.0, b.0], value, rg, Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if self.nodes[b.0].value.data().contains(&0.0) {
            return Err(DiffError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale(c), a, |x| c * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        if let Some(&bad) = self.nodes[a.0].value.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(DiffError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(Op::Log, a, f64::ln))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        if let Some(&bad) = self.nodes[a.0].value.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(DiffError::Domain {
                op: "sqrt",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(Op::Sqrt, a, f64::sqrt))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid, a, sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh, a, f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu, a, |x| x.max(0.0))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(Op::Elu, a, |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    /// Elementwise clamp to `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp { lo, hi }, a, |x| x.clamp(lo, hi))
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var, DiffError> {
        let src = &self.nodes[a.0].value;
        if src.rank() == 0 {
            return Err(DiffError::Rank {
                op: "softmax_lastdim",
                expected: 1,
                shape: vec![],
            });
        }
        let (rows, cols) = src.dims2();
        let mut out = src.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::SoftmaxLastDim, vec![a.0], value, rg, Vec::new()))
    }

    /// Zero-mean, unit-variance normalization along the last axis (no affine).
    pub fn layernorm_lastdim(&mut self, a: Var) -> Result<Var, DiffError> {
        let src = &self.nodes[a.0].value;
        if src.rank() == 0 {
            return Err(DiffError::Rank {
                op: "layernorm_lastdim",
                expected: 1,
                shape: vec![],
            });
        }
        let (rows, cols) = src.dims2();
        let mut out = src.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::LayerNormLastDim, vec![a.0], value, rg, inv_std))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Sum, vec![a.0], Tensor::scalar(total), rg, Vec::new())
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.nodes[a.0].value.data();
        let m = src.iter().sum::<f64>() / src.len() as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::Mean, vec![a.0], Tensor::scalar(m), rg, Vec::new())
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let src = &self.nodes[a.0].value;
        let (r, c) = ensure_rank2("transpose", src)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Transpose, vec![a.0], value, rg, Vec::new()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let src = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != src.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), src.data().to_vec())?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Reshape, vec![a.0], value, rg, Vec::new()))
    }

    /// Concatenates rank-2 tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        if parts.is_empty() || axis > 1 {
            return Err(DiffError::Invalid(format!(
                "concat needs ≥1 input and axis 0 or 1 (got {} inputs, axis {axis})",
                parts.len()
            )));
        }
        let first = &self.nodes[parts[0].0].value;
        let (r0, c0) = ensure_rank2("concat", first)?;
        let mut dims = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.nodes[p.0].value;
            let (r, c) = ensure_rank2("concat", t)?;
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            dims.push((r, c));
        }
        let (out_r, out_c) = if axis == 0 {
            (dims.iter().map(|d| d.0).sum(), c0)
        } else {
            (r0, dims.iter().map(|d| d.1).sum())
        };
        let mut out = Vec::with_capacity(out_r * out_c);
        if axis == 0 {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.data());
            }
        } else {
            for i in 0..out_r {
                for (p, &(_, c)) in parts.iter().zip(&dims) {
                    out.extend_from_slice(&self.nodes[p.0].value.data()[i * c..(i + 1) * c]);
                }
            }
        }
        let value = Tensor::new(vec![out_r, out_c], out)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.any_grad(&ids);
        Ok(self.push(Op::Concat { axis }, ids, value, rg, Vec::new()))
    }

    /// Half-open range `[start, end)` of a rank-2 tensor along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, DiffError> {
        let src = &self.nodes[a.0].value;
        let (r, c) = ensure_rank2("slice", src)?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start >= end || end > extent {
            return Err(DiffError::Invalid(format!(
                "slice [{start},{end}) on axis {axis} out of range for shape {:?}",
                src.shape()
            )));
        }
        let (out, shape) = if axis == 0 {
            (src.data()[start * c..end * c].to_vec(), vec![end - start, c])
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&src.data()[i * c + start..i * c + end]);
            }
            (out, vec![r, w])
        };
        let value = Tensor::new(shape, out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Slice { axis, start, end }, vec![a.0], value, rg, Vec::new()))
    }

    /// Explicit broadcast: a scalar expands to any shape; otherwise ranks must
    /// agree and each source extent must be 1 or equal to the target extent.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let src = &self.nodes[a.0].value;
        let mismatch = || DiffError::ShapeMismatch {
            op: "broadcast",
            lhs: src.shape().to_vec(),
            rhs: shape.to_vec(),
        };
        let len: usize = shape.iter().product();
        let out = if src.rank() == 0 {
            vec![src.item(); len]
        } else {
            if src.rank() != shape.len() || shape.len() > 2 {
                return Err(mismatch());
            }
            if src.shape().iter().zip(shape).any(|(&s, &t)| s != 1 && s != t) {
                return Err(mismatch());
            }
            let (sr, sc) = src.dims2();
            let (tr, tc) = if shape.len() == 1 { (1, shape[0]) } else { (shape[0], shape[1]) };
            let mut out = Vec::with_capacity(len);
            for i in 0..tr {
                let si = if sr == 1 { 0 } else { i };
                for j in 0..tc {
                    let sj = if sc == 1 { 0 } else { j };
                    out.push(src.data()[si * sc + sj]);
                }
            }
            out
        };
        let value = Tensor::new(shape.to_vec(), out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Broadcast, vec![a.0], value, rg, Vec::new()))
    }

    /// Reverse sweep from a scalar loss. Leaf gradients are stored on the
    /// graph and can be read back with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.op == Op::Leaf {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        for (id, slot) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[id];
            if node.op == Op::Leaf && node.requires_grad {
                if let Some(g) = slot {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let input = |k: usize| &self.nodes[node.inputs[k]];
        let wants = |k: usize| self.nodes[node.inputs[k]].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k) = a.value.dims2();
                let n = b.value.dims2().1;
                if wants(0) {
                    let ga = accumulate(&mut grads[node.inputs[0]], m * k);
                    gemm_nt(g, b.value.data(), ga, m, n, k);
                }
                if wants(1) {
                    let gb = accumulate(&mut grads[node.inputs[1]], k * n);
                    gemm_tn(a.value.data(), g, gb, k, m, n);
                }
            }
            Op::Add | Op::Sub => {
                let sign = if node.op == Op::Add { 1.0 } else { -1.0 };
                for (k, s) in [(0, 1.0), (1, sign)] {
                    if wants(k) {
                        let ga = accumulate(&mut grads[node.inputs[k]], g.len());
                        ga.iter_mut().zip(g).for_each(|(a, &d)| *a += s * d);
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (input(0).value.data(), input(1).value.data());
                if wants(0) {
                    let ga = accumulate(&mut grads[node.inputs[0]], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * b[i];
                    }
                }
                if wants(1) {
                    let gb = accumulate(&mut grads[node.inputs[1]], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * a[i];
                    }
                }
            }
            Op::Div => {
                let b = input(1).value.data();
                if wants(0) {
                    let ga = accumulate(&mut grads[node.inputs[0]], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] / b[i];
                    }
                }
                if wants(1) {
                    let gb = accumulate(&mut grads[node.inputs[1]], g.len());
                    for i in 0..g.len() {
                        gb[i] -= g[i] * out[i] / b[i];
                    }
                }
            }
            Op::Neg
            | Op::Scale(_)
            | Op::Exp
            | Op::Log
            | Op::Sqrt
            | Op::Square
            | Op::Sigmoid
            | Op::Tanh
            | Op::Relu
            | Op::Elu
            | Op::Clamp { .. } => {
                let x = input(0).value.data();
                let ga = accumulate(&mut grads[node.inputs[0]], g.len());
                for i in 0..g.len() {
                    let d = match node.op {
                        Op::Neg => -1.0,
                        Op::Scale(c) => c,
                        Op::Exp => out[i],
                        Op::Log => 1.0 / x[i],
                        Op::Sqrt => 0.5 / out[i],
                        Op::Square => 2.0 * x[i],
                        Op::Sigmoid => out[i] * (1.0 - out[i]),
                        Op::Tanh => 1.0 - out[i] * out[i],
                        Op::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Op::Elu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                out[i] + 1.0
                            }
                        }
                        Op::Clamp { lo, hi } => {
                            if x[i] >= lo && x[i] <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        _ => unreachable!(),
                    };
                    ga[i] += g[i] * d;
                }
            }
            Op::SoftmaxLastDim => {
                let (rows, cols) = node.value.dims2();
                let ga = accumulate(&mut grads[node.inputs[0]], g.len());
                for r in 0..rows {
                    let s = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        ga[r * cols + j] += s[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNormLastDim => {
                let (rows, cols) = node.value.dims2();
                let n = cols as f64;
                let ga = accumulate(&mut grads[node.inputs[0]], g.len());
                for r in 0..rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    let inv = node.saved[r];
                    for j in 0..cols {
                        ga[r * cols + j] += inv * (gr[j] - mean_g - y[j] * mean_gy);
                    }
                }
            }
            Op::Sum | Op::Mean => {
                let len = input(0).value.len();
                let d = if node.op == Op::Sum { g[0] } else { g[0] / len as f64 };
                let ga = accumulate(&mut grads[node.inputs[0]], len);
                ga.iter_mut().for_each(|a| *a += d);
            }
            Op::Transpose => {
                let (r, c) = input(0).value.dims2();
                let ga = accumulate(&mut grads[node.inputs[0]], g.len());
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape => {
                let ga = accumulate(&mut grads[node.inputs[0]], g.len());
                ga.iter_mut().zip(g).for_each(|(a, &d)| *a += d);
            }
            Op::Concat { axis } => {
                let (out_r, out_c) = node.value.dims2();
                let mut offset = 0;
                for (k, &inp) in node.inputs.iter().enumerate() {
                    let (r, c) = self.nodes[inp].value.dims2();
                    if wants(k) {
                        let ga = accumulate(&mut grads[inp], r * c);
                        if *axis == 0 {
                            for (a, &d) in ga.iter_mut().zip(&g[offset * out_c..(offset + r) * out_c]) {
                                *a += d;
                            }
                        } else {
                            for i in 0..out_r {
                                for j in 0..c {
                                    ga[i * c + j] += g[i * out_c + offset + j];
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { axis, start, end } => {
                let (r, c) = input(0).value.dims2();
                let ga = accumulate(&mut grads[node.inputs[0]], r * c);
                if *axis == 0 {
                    for (a, &d) in ga[start * c..end * c].iter_mut().zip(g) {
                        *a += d;
                    }
                } else {
                    let w = end - start;
                    for i in 0..r {
                        for j in 0..w {
                            ga[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::Broadcast => {
                let src = &input(0).value;
                let ga = accumulate(&mut grads[node.inputs[0]], src.len());
                if src.rank() == 0 {
                    ga[0] += g.iter().sum::<f64>();
                } else {
                    let (sr, sc) = src.dims2();
                    let (tr, tc) = node.value.dims2();
                    for i in 0..tr {
                        let si = if sr == 1 { 0 } else { i };
                        for j in 0..tc {
                            let sj = if sc == 1 { 0 } else { j };
                            ga[si * sc + sj] += g[i * tc + j];
                        }
                    }
                }
            }
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
