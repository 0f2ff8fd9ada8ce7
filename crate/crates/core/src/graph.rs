//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node to the [`Tape`] in topological order and
//! records which parents it read. [`Tape::backward`] walks the nodes once in
//! reverse and accumulates gradients into every node that requires them.
//!
//! Only scalar-with-tensor broadcasting is supported by the elementwise
//! operations. Row-structured combinations (bias add, per-row scaling,
//! grouped pooling) are explicit operations with their own names.
//!
//! A tape is single-use: build the graph, call `backward` once, read the
//! gradients, then drop the tape (or [`Tape::reset`] it) before the next step.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, Tensor};

/// Norm threshold below which a vector is treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Exp,
    Log,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    StopGradient,
    Reshape(NodeId),
    Transpose(NodeId),
    MatMul(NodeId, NodeId),
    Binary(Binary, NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Unary(Unary, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowMeans(NodeId),
    AddBias(NodeId, NodeId),
    ScaleRows(NodeId, NodeId),
    MaskedSoftmax(NodeId),
    SegmentPool { weights: NodeId, x: NodeId },
    NormalizeRows { x: NodeId, norms: Vec<f64> },
    Cosine { a: NodeId, b: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f64> },
    BceWithLogits { logits: NodeId, targets: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

/// Row view of a tensor: 1-D tensors are one row, 2-D tensors are their rows.
fn as_rows(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Dimension(format!(
            "expected a vector or matrix, got shape {other:?}"
        ))),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every node so the tape can record a fresh graph.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.rg(id)
    }

    pub fn is_stop_gradient(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::StopGradient)
    }

    /// Gradient accumulated by the last backward pass; zeros when the node
    /// was never reached.
    pub fn grad(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape()),
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient, false)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let d = xv.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(x), rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let out = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if bv.is_scalar() {
            let y = bv.item();
            av.map(|x| f(x, y))
        } else if av.is_scalar() {
            let x = av.item();
            bv.map(|y| f(x, y))
        } else {
            return Err(Error::Dimension(format!(
                "elementwise shapes {:?} and {:?} are neither equal nor scalar-with-tensor",
                av.shape(),
                bv.shape()
            )));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddConst(x), rg)
    }

    pub fn unary(&mut self, kind: Unary, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let out = match kind {
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::Exp => xv.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
                xv.map(f64::ln)
            }
            Unary::Tanh => xv.map(fast_tanh),
            Unary::Relu => xv.map(|v| v.max(0.0)),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Unary(kind, x), rg))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Exp, x).expect("exp is total")
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Tanh, x).expect("tanh is total")
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Unary::Relu, x).expect("relu is total")
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.sum() / v.numel().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// `[n×m] → [n]`, the mean of each row.
    pub fn row_means(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, m) = xv.dims2()?;
        let out: Vec<f64> = (0..n)
            .map(|i| xv.row(i).iter().sum::<f64>() / m as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::RowMeans(x), rg))
    }

    /// `x[n×m] + b[m]` added to every row.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let (n, m) = xv.dims2()?;
        if bv.shape() != [m] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {m} columns",
                bv.shape()
            )));
        }
        let mut out = xv.data().to_vec();
        for i in 0..n {
            for (o, b) in out[i * m..(i + 1) * m].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::AddBias(x, bias), rg))
    }

    /// `y[i,j] = w[i] · x[i,j]` for `x[n×m]`, `w[n]`.
    pub fn scale_rows(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, m) = xv.dims2()?;
        if wv.numel() != n {
            return Err(Error::Dimension(format!(
                "row weights of length {} for {n} rows",
                wv.numel()
            )));
        }
        let mut out = xv.data().to_vec();
        for (i, &wi) in wv.data().iter().enumerate() {
            for o in &mut out[i * m..(i + 1) * m] {
                *o *= wi;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::ScaleRows(x, w), rg))
    }

    /// Softmax of `scores` restricted to `active` indices; inactive entries
    /// are exactly zero. A vector is one set, a matrix is one set per row.
    pub fn softmax_over_set(&mut self, scores: NodeId, active: &[bool]) -> Result<NodeId> {
        let sv = self.value(scores);
        let (rows, cols) = as_rows(sv)?;
        if active.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "active mask of length {} for {rows}x{cols} scores",
                active.len()
            )));
        }
        let d = sv.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let span = r * cols..(r + 1) * cols;
            let act = &active[span.clone()];
            let row = &d[span.clone()];
            let max = row
                .iter()
                .zip(act)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyVisibleSet);
            }
            let o = &mut out[span];
            let mut total = 0.0;
            for j in 0..cols {
                if act[j] {
                    o[j] = (row[j] - max).exp();
                    total += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(sv.shape().to_vec(), out)?;
        let rg = self.rg(scores);
        Ok(self.push(value, Op::MaskedSoftmax(scores), rg))
    }

    /// Grouped weighted sum: `x` holds `B·T` rows of width `d`, `weights` is
    /// `[B×T]`; row `b` of the output is `Σ_t weights[b,t] · x[b·T + t]`.
    pub fn segment_pool(&mut self, weights: NodeId, x: NodeId) -> Result<NodeId> {
        let wv = self.value(weights);
        let xv = self.value(x);
        let (b, t) = wv.dims2()?;
        let (n, d) = xv.dims2()?;
        if n != b * t {
            return Err(Error::Dimension(format!(
                "segment pool: {n} rows for {b} groups of {t}"
            )));
        }
        let mut out = vec![0.0; b * d];
        for g in 0..b {
            let o = &mut out[g * d..(g + 1) * d];
            for j in 0..t {
                let w = wv.data()[g * t + j];
                if w == 0.0 {
                    continue;
                }
                for (ov, xv) in o.iter_mut().zip(xv.row(g * t + j)) {
                    *ov += w * xv;
                }
            }
        }
        let rg = self.rg(weights) || self.rg(x);
        Ok(self.push(
            Tensor::matrix(b, d, out)?,
            Op::SegmentPool { weights, x },
            rg,
        ))
    }

    /// Divides each row (or the whole vector) by its ℓ2 norm.
    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, cols) = as_rows(xv)?;
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                return Err(Error::DegenerateVector(norm));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, rg))
    }

    /// Cosine similarity of two vectors (scalar result) or of matching rows
    /// of two matrices (vector result).
    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "cosine of shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (rows, cols) = as_rows(av)?;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &av.data()[r * cols..(r + 1) * cols];
            let y = &bv.data()[r * cols..(r + 1) * cols];
            out.push(cosine_raw(x, y)?.0);
        }
        let value = if av.shape().len() == 1 {
            Tensor::scalar(out[0])
        } else {
            Tensor::vector(out)
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Cosine { a, b }, rg))
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (n, c) = lv.dims2()?;
        if targets.len() != n || targets.iter().any(|&t| t >= c) {
            return Err(Error::Dimension(format!(
                "cross-entropy targets {targets:?} for {n}x{c} logits"
            )));
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[targets[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::Dimension(format!(
                "bce logits {:?} vs targets {:?}",
                lv.shape(),
                targets.shape()
            )));
        }
        let n = lv.numel() as f64;
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(0.0) - t * x + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / n),
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Propagates `d root / d node` to every node that requires gradient.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g)?;
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(x, g.reshape(&shape)?);
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(x).dims2()?;
                let mut out = vec![0.0; r * c];
                for a in 0..r {
                    for b in 0..c {
                        out[a * c + b] = g.data()[b * r + a];
                    }
                }
                self.accumulate(x, Tensor::matrix(r, c, out)?);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2()?;
                let (_, n) = self.value(b).dims2()?;
                if self.rg(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(m, n, k, g.data(), false, self.value(b).data(), true, &mut ga);
                    self.accumulate(a, Tensor::matrix(m, k, ga)?);
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_acc(k, m, n, self.value(a).data(), true, g.data(), false, &mut gb);
                    self.accumulate(b, Tensor::matrix(k, n, gb)?);
                }
            }
            Op::Binary(kind, a, b) => {
                let (ga, gb) = {
                    let av = self.value(a);
                    let bv = self.value(b);
                    let out_shape = g.shape();
                    let expand = |t: &Tensor| -> Vec<f64> {
                        if t.shape() == out_shape {
                            t.data().to_vec()
                        } else {
                            vec![t.item(); g.numel()]
                        }
                    };
                    let (ae, be) = (expand(av), expand(bv));
                    let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                        Binary::Add => (g.data().to_vec(), g.data().to_vec()),
                        Binary::Sub => (g.data().to_vec(), g.data().iter().map(|v| -v).collect()),
                        Binary::Mul => (
                            g.data().iter().zip(&be).map(|(g, b)| g * b).collect(),
                            g.data().iter().zip(&ae).map(|(g, a)| g * a).collect(),
                        ),
                    };
                    let reduce = |t: &Tensor, d: Vec<f64>| -> Result<Tensor> {
                        if t.shape() == out_shape {
                            Tensor::new(out_shape.to_vec(), d)
                        } else {
                            Ok(Tensor::new(t.shape().to_vec(), vec![d.iter().sum()])?)
                        }
                    };
                    (reduce(av, da)?, reduce(bv, db)?)
                };
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Scale(x, c) => self.accumulate(x, g.map(|v| v * c)),
            Op::AddConst(x) => self.accumulate(x, g.clone()),
            Op::Unary(kind, x) => {
                let xv = self.value(x);
                let yv = &self.nodes[i].value;
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xv.data().iter().zip(yv.data()))
                    .map(|(&g, (&x, &y))| {
                        g * match kind {
                            Unary::Sigmoid => y * (1.0 - y),
                            Unary::Exp => y,
                            Unary::Log => 1.0 / x,
                            Unary::Tanh => 1.0 - y * y,
                            Unary::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        }
                    })
                    .collect();
                let gx = Tensor::new(xv.shape().to_vec(), data)?;
                self.accumulate(x, gx);
            }
            Op::Sum(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(x, Tensor::filled(&shape, g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(x);
                let v = g.item() / xv.numel().max(1) as f64;
                let shape = xv.shape().to_vec();
                self.accumulate(x, Tensor::filled(&shape, v));
            }
            Op::RowMeans(x) => {
                let (n, m) = self.value(x).dims2()?;
                let mut out = vec![0.0; n * m];
                for r in 0..n {
                    let v = g.data()[r] / m as f64;
                    out[r * m..(r + 1) * m].iter_mut().for_each(|o| *o = v);
                }
                self.accumulate(x, Tensor::matrix(n, m, out)?);
            }
            Op::AddBias(x, bias) => {
                let (n, m) = g.dims2()?;
                if self.rg(bias) {
                    let mut gb = vec![0.0; m];
                    for r in 0..n {
                        for (o, v) in gb.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(bias, Tensor::vector(gb));
                }
                self.accumulate(x, g.clone());
            }
            Op::ScaleRows(x, w) => {
                let (n, m) = g.dims2()?;
                let xv = self.value(x);
                let wv = self.value(w);
                let mut gx = vec![0.0; n * m];
                let mut gw = vec![0.0; n];
                for r in 0..n {
                    let wr = wv.data()[r];
                    let gr = g.row(r);
                    let xr = xv.row(r);
                    let mut acc = 0.0;
                    for j in 0..m {
                        gx[r * m + j] = wr * gr[j];
                        acc += xr[j] * gr[j];
                    }
                    gw[r] = acc;
                }
                let w_shape = wv.shape().to_vec();
                self.accumulate(x, Tensor::matrix(n, m, gx)?);
                self.accumulate(w, Tensor::new(w_shape, gw)?);
            }
            Op::MaskedSoftmax(scores) => {
                let y = &self.nodes[i].value;
                let (rows, cols) = as_rows(y)?;
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        out[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                let shape = y.shape().to_vec();
                self.accumulate(scores, Tensor::new(shape, out)?);
            }
            Op::SegmentPool { weights, x } => {
                let (b, t) = self.value(weights).dims2()?;
                let (_, d) = self.value(x).dims2()?;
                let wv = self.value(weights);
                let xv = self.value(x);
                let mut gw = vec![0.0; b * t];
                let mut gx = vec![0.0; b * t * d];
                for grp in 0..b {
                    let gr = g.row(grp);
                    for j in 0..t {
                        let row = grp * t + j;
                        let w = wv.data()[row];
                        let xr = xv.row(row);
                        gw[row] = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, gv) in gx[row * d..(row + 1) * d].iter_mut().zip(gr) {
                            *o = w * gv;
                        }
                    }
                }
                self.accumulate(weights, Tensor::matrix(b, t, gw)?);
                self.accumulate(x, Tensor::matrix(b * t, d, gx)?);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &self.nodes[i].value;
                let (rows, cols) = as_rows(y)?;
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        out[r * cols + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                let shape = y.shape().to_vec();
                self.accumulate(x, Tensor::new(shape, out)?);
            }
            Op::Cosine { a, b } => {
                let av = self.value(a);
                let bv = self.value(b);
                let (rows, cols) = as_rows(av)?;
                let mut ga = vec![0.0; rows * cols];
                let mut gb = vec![0.0; rows * cols];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let x = &av.data()[span.clone()];
                    let y = &bv.data()[span];
                    let (c, nx, ny) = cosine_raw(x, y)?;
                    let gr = g.data()[r];
                    for j in 0..cols {
                        ga[r * cols + j] = gr * (y[j] / (nx * ny) - c * x[j] / (nx * nx));
                        gb[r * cols + j] = gr * (x[j] / (nx * ny) - c * y[j] / (ny * ny));
                    }
                }
                let shape = av.shape().to_vec();
                let ga = Tensor::new(shape.clone(), ga)?;
                let gb = Tensor::new(shape, gb)?;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (n, c) = self.value(logits).dims2()?;
                let scale = g.item() / n as f64;
                let mut out = probs;
                for (r, &t) in targets.iter().enumerate() {
                    out[r * c + t] -= 1.0;
                }
                out.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(logits, Tensor::matrix(n, c, out)?);
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(logits);
                let scale = g.item() / lv.numel() as f64;
                let data = lv
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &t)| scale * (sigmoid(x) - t))
                    .collect();
                let gl = Tensor::new(lv.shape().to_vec(), data)?;
                self.accumulate(logits, gl);
            }
        }
        Ok(())
    }
}

/// `(cos, ‖x‖, ‖y‖)`, rejecting near-zero vectors.
fn cosine_raw(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx < NORM_EPS || ny < NORM_EPS {
        return Err(Error::DegenerateVector(nx.min(ny)));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(((dot / (nx * ny)).clamp(-1.0, 1.0), nx, ny))
}

/// `tanh` through a single `exp`. Absolute error stays at the ulp level.
pub fn fast_tanh(x: f64) -> f64 {
    let a = x.abs();
    if a > 20.0 {
        return x.signum();
    }
    let t = 1.0 - 2.0 / ((2.0 * a).exp() + 1.0);
    t.copysign(x)
}

/// Cosine similarity of two plain slices.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    cosine_raw(x, y).map(|(c, _, _)| c)
}
