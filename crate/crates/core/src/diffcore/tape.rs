use super::kernels;
use super::{DiffError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule corruption, used by the gradient checker to prove
/// that it actually detects broken rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// ReLU backward passes the upstream gradient through ungated.
    ReluBackward,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        /// Per-row weights already divided by their sum.
        weights: Option<Vec<f64>>,
    },
    FrobeniusSq(Var),
    GradReverse {
        input: Var,
        lambda: f64,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    ScaleRows {
        input: Var,
        weights: Vec<f64>,
    },
    MeanRows(Var),
    Sum(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    GatherRows {
        input: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    Combine(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape. Nodes are appended in evaluation order, which is
/// a topological order by construction; backward walks it in reverse once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), Op::Leaf, true)
    }

    /// A constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient populated by the last [`Tape::backward`], if `v` was reachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_rows();
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, DiffError> {
        self.cross_entropy_impl(logits, labels, None)
    }

    /// `Σ_r w_r·CE_r / Σ_r w_r` with constant non-negative row weights; 0 when
    /// every weight is 0.
    pub fn cross_entropy_weighted(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var, DiffError> {
        if weights.len() != labels.len() {
            return Err(DiffError::Shape {
                op: "cross_entropy_weighted",
                left: (labels.len(), 1),
                right: (weights.len(), 1),
            });
        }
        if let Some(&w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(DiffError::Weight(w));
        }
        let total: f64 = weights.iter().sum();
        let normalized = weights
            .iter()
            .map(|w| if total > 0.0 { w / total } else { 0.0 })
            .collect();
        self.cross_entropy_impl(logits, labels, Some(normalized))
    }

    fn cross_entropy_impl(&mut self, logits: Var, labels: &[usize], weights: Option<Vec<f64>>) -> Result<Var, DiffError> {
        let lv = self.value(logits);
        let (b, c) = lv.shape();
        if labels.len() != b {
            return Err(DiffError::Shape {
                op: "cross_entropy",
                left: (b, c),
                right: (labels.len(), 1),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(DiffError::Label {
                index,
                label,
                classes: c,
            });
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let ce = lse - row[label];
            total += match &weights {
                Some(w) => w[r] * ce,
                None => ce,
            };
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let loss = match (&weights, b) {
            (Some(_), _) => total,
            (None, 0) => 0.0,
            (None, _) => total / b as f64,
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                weights,
            },
            rg,
        ))
    }

    pub fn frobenius_sq(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).values().iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::FrobeniusSq(x), rg)
    }

    /// Identity forward; backward multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var, DiffError> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(DiffError::Lambda(lambda));
        }
        let out = self.value(x).detached();
        let rg = self.rg(x);
        Ok(self.push(out, Op::GradReverse { input: x, lambda }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::Shape {
                op,
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.shape(a);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(r, c, values)?, Op::Add(a, b), rg))
    }

    /// Elementwise sum of two same-shape codes (the shared-code sum fed to the predictor).
    pub fn elementwise_sum(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.add(a, b)
    }

    /// `x (m×n) + bias (1×n)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let (m, n) = self.shape(x);
        if self.shape(bias) != (1, n) {
            return Err(DiffError::Shape {
                op: "add_row",
                left: (m, n),
                right: self.shape(bias),
            });
        }
        let bv = self.value(bias).values().to_vec();
        let mut out = self.value(x).detached();
        if n > 0 {
            for row in out.values_mut().chunks_mut(n) {
                for (o, b) in row.iter_mut().zip(&bv) {
                    *o += b;
                }
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// `x + constant`; the constant receives no gradient.
    pub fn add_const(&mut self, x: Var, constant: &Tensor) -> Result<Var, DiffError> {
        if self.shape(x) != constant.shape() {
            return Err(DiffError::Shape {
                op: "add_const",
                left: self.shape(x),
                right: constant.shape(),
            });
        }
        let mut out = self.value(x).detached();
        for (o, c) in out.values_mut().iter_mut().zip(constant.values()) {
            *o += c;
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, x: Var, weights: &[f64]) -> Result<Var, DiffError> {
        let (m, n) = self.shape(x);
        if weights.len() != m {
            return Err(DiffError::Shape {
                op: "scale_rows",
                left: (m, n),
                right: (weights.len(), 1),
            });
        }
        let mut out = self.value(x).detached();
        if n > 0 {
            for (row, w) in out.values_mut().chunks_mut(n).zip(weights) {
                row.iter_mut().for_each(|v| *v *= w);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::ScaleRows {
                input: x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Column means: `m×n → 1×n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        if m > 0 {
            out.iter_mut().for_each(|o| *o /= m as f64);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(1, n, out).expect("shape"),
            Op::MeanRows(x),
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Vertical stack: rows of `parts[0]`, then rows of `parts[1]`, ...
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row-stack of equal-width tensors; alias of [`Tape::concat_rows`].
    pub fn row_stack(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        self.concat_rows(parts)
    }

    /// Horizontal concatenation of tensors sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(DiffError::Shape {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: (r, c),
                });
            }
            cols += c;
        }
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                values.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(rows, cols, values)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let (m, n) = self.shape(x);
        if start + len > m {
            return Err(DiffError::Range {
                op: "slice_rows",
                start,
                len,
                extent: m,
            });
        }
        let values = self.value(x).values()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(len, n, values)?,
            Op::SliceRows { input: x, start },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let (m, n) = self.shape(x);
        if start + len > n {
            return Err(DiffError::Range {
                op: "slice_cols",
                start,
                len,
                extent: n,
            });
        }
        let xv = self.value(x);
        let mut values = Vec::with_capacity(m * len);
        for r in 0..m {
            values.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(m, len, values)?,
            Op::SliceCols { input: x, start },
            rg,
        ))
    }

    /// Output row `i` is input row `indices[i]`; repeated indices accumulate on backward.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let m = self.shape(x).0;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(DiffError::Range {
                op: "gather_rows",
                start: bad,
                len: 1,
                extent: m,
            });
        }
        let out = self.value(x).select_rows(indices);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                input: x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, DiffError> {
        let values = self.value(x).values().to_vec();
        let out = Tensor::new(rows, cols, values)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `Σ coef_i · x_i` over same-shape tensors.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var, DiffError> {
        let Some(&(first, _)) = terms.first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        for &(v, _) in &terms[1..] {
            self.same_shape("combine", first, v)?;
        }
        let (r, c) = self.shape(first);
        let mut out = vec![0.0; r * c];
        for &(v, coef) in terms {
            for (o, x) in out.iter_mut().zip(self.value(v).values()) {
                *o += coef * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::new(r, c, out)?, Op::Combine(terms.to_vec()), rg))
    }

    /// Reverse pass from a scalar node. Clears previous gradients, then writes
    /// accumulated gradients into the grad slot of every node that requires one
    /// and is reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(DiffError::NotScalar { shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.value.clear_grad();
            if let (true, Some(g)) = (node.requires_grad, g) {
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.shape();
                let n = bv.cols();
                if self.rg(*a) {
                    // ga(m×k) += g(m×n) · bᵀ(n×k)
                    let bt = bv.transpose();
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_into(g, bt.values(), &mut ga, m, n, k);
                    accumulate(grads, *a, &ga);
                }
                if self.rg(*b) {
                    // gb(k×n) += aᵀ(k×m) · g(m×n)
                    let at = av.transpose();
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_into(at.values(), g, &mut gb, k, m, n);
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).values();
                let gx: Vec<f64> = if self.fault == Some(Fault::ReluBackward) {
                    g.to_vec()
                } else {
                    xv.iter()
                        .zip(g)
                        .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                        .collect()
                };
                accumulate(grads, *x, &gx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut gx = vec![0.0; y.len()];
                if n > 0 {
                    for ((gr, yr), out) in g
                        .chunks(n)
                        .zip(y.values().chunks(n))
                        .zip(gx.chunks_mut(n))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yi * (gi - dot);
                        }
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                weights,
            } => {
                let b = labels.len();
                if b == 0 {
                    return;
                }
                let c = probs.len() / b;
                let mut gx = Vec::with_capacity(probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    let scale = match weights {
                        Some(w) => g[0] * w[r],
                        None => g[0] / b as f64,
                    };
                    gx.extend(probs[r * c..(r + 1) * c].iter().map(|p| p * scale));
                    gx[r * c + label] -= scale;
                }
                accumulate(grads, *logits, &gx);
            }
            Op::FrobeniusSq(x) => {
                let gx: Vec<f64> = self
                    .value(*x)
                    .values()
                    .iter()
                    .map(|v| 2.0 * v * g[0])
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::GradReverse { input, lambda } => {
                let gx: Vec<f64> = g.iter().map(|v| -lambda * v).collect();
                accumulate(grads, *input, &gx);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::AddRow(x, bias) => {
                accumulate(grads, *x, g);
                if self.rg(*bias) {
                    let n = self.shape(*bias).1;
                    let mut gb = vec![0.0; n];
                    if n > 0 {
                        for row in g.chunks(n) {
                            for (o, v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                    accumulate(grads, *bias, &gb);
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Scale(x, f) => {
                let gx: Vec<f64> = g.iter().map(|v| v * f).collect();
                accumulate(grads, *x, &gx);
            }
            Op::ScaleRows { input, weights } => {
                let n = self.shape(*input).1;
                let mut gx = g.to_vec();
                if n > 0 {
                    for (row, w) in gx.chunks_mut(n).zip(weights) {
                        row.iter_mut().for_each(|v| *v *= w);
                    }
                }
                accumulate(grads, *input, &gx);
            }
            Op::MeanRows(x) => {
                let (m, n) = self.shape(*x);
                let mut gx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    gx.extend(g.iter().map(|v| v / m as f64));
                }
                accumulate(grads, *x, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).len()];
                accumulate(grads, *x, &gx);
            }
            Op::Transpose(x) => {
                let (r, c) = node.value.shape();
                let gt = Tensor::new(r, c, g.to_vec()).expect("shape").transpose();
                accumulate(grads, *x, gt.values());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    accumulate(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = node.value.shape();
                let mut start = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * cols + start..r * cols + start + pc]);
                        }
                        accumulate(grads, p, &gp);
                    }
                    start += pc;
                }
            }
            Op::SliceRows { input, start } => {
                if self.rg(*input) {
                    let (m, n) = self.shape(*input);
                    let mut gx = vec![0.0; m * n];
                    gx[start * n..start * n + g.len()].copy_from_slice(g);
                    accumulate(grads, *input, &gx);
                }
            }
            Op::SliceCols { input, start } => {
                if self.rg(*input) {
                    let (m, n) = self.shape(*input);
                    let len = node.value.cols();
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        gx[r * n + start..r * n + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(grads, *input, &gx);
                }
            }
            Op::GatherRows { input, indices } => {
                if self.rg(*input) {
                    let (m, n) = self.shape(*input);
                    let mut gx = vec![0.0; m * n];
                    for (out_row, &src) in indices.iter().enumerate() {
                        for c in 0..n {
                            gx[src * n + c] += g[out_row * n + c];
                        }
                    }
                    accumulate(grads, *input, &gx);
                }
            }
            Op::Combine(terms) => {
                for &(v, coef) in terms {
                    let gv: Vec<f64> = g.iter().map(|x| coef * x).collect();
                    accumulate(grads, v, &gv);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let x = tape.constant(t(&[vec![1.5, -2.0, 3.0], vec![0.25, 4.0, -1.0]]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn small_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[vec![1.0, 2.0]]));
        let b = tape.constant(t(&[vec![3.0], vec![4.0]]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).values(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            DiffError::Shape {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert!(err.to_string().contains("2×3"));
    }

    #[test]
    fn relu_forward_and_dead_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![-1.0, 0.0, 2.0]]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).values(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![-1.0, -0.5, -3.0]]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.value(y).values().iter().all(|&v| v == 0.0));
        assert!(tape.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 3));
        let y = tape.softmax_rows(x);
        for &v in tape.value(y).values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 2));
        for label in 0..2 {
            let l = tape.cross_entropy(x, &[label]).unwrap();
            assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let confident = tape.constant(t(&[vec![20.0, -20.0]]));
        let l = tape.cross_entropy(confident, &[0]).unwrap();
        assert!(tape.value(l).item() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 3));
        assert_eq!(
            tape.cross_entropy(x, &[0, 3]).unwrap_err(),
            DiffError::Label {
                index: 1,
                label: 3,
                classes: 3
            }
        );
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot_over_batch() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![0.5, -1.0, 2.0], vec![0.0, 0.3, -0.2]]));
        let l = tape.cross_entropy(x, &[2, 0]).unwrap();
        tape.backward(l).unwrap();
        let p = tape.value(x).softmax_rows();
        let g = tape.grad(x).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let label = [2, 0][r];
                let expected = (p.get(r, c) - if c == label { 1.0 } else { 0.0 }) / 2.0;
                assert!((g[r * 3 + c] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn frobenius_values_and_gradient() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(3, 2));
        let fz = tape.frobenius_sq(z);
        assert_eq!(tape.value(fz).item(), 0.0);
        let x = tape.param(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let f = tape.frobenius_sq(x);
        assert_eq!(tape.value(f).item(), 30.0);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn grad_reverse_identity_forward_and_negated_backward() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![0.7]]));
        let r = tape.grad_reverse(x, 1.0).unwrap();
        assert_eq!(tape.value(r).values(), tape.value(x).values());
        let sq = tape.frobenius_sq(r);
        tape.backward(sq).unwrap();
        assert!((tape.grad(x).unwrap()[0] - (-2.0 * 0.7)).abs() < 1e-15);

        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![0.7, -0.2]]));
        let r = tape.grad_reverse(x, 0.0).unwrap();
        let sq = tape.frobenius_sq(r);
        tape.backward(sq).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn grad_reverse_rejects_negative_lambda() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(1, 1));
        assert!(matches!(
            tape.grad_reverse(x, -0.5),
            Err(DiffError::Lambda(_))
        ));
    }

    #[test]
    fn aux_op_identities() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(3, 2, |r, c| (r * 2 + c) as f64 - 2.5));
        let z = tape.constant(Tensor::zeros(3, 2));
        let s = tape.elementwise_sum(x, z).unwrap();
        assert_eq!(tape.value(s).values(), tape.value(x).values());

        let tt = tape.transpose(x);
        let ttt = tape.transpose(tt);
        assert_eq!(tape.value(ttt).values(), tape.value(x).values());

        let y = tape.constant(Tensor::from_fn(2, 2, |r, c| (r + c) as f64));
        let cat = tape.concat_rows(&[x, y]).unwrap();
        let back_x = tape.slice_rows(cat, 0, 3).unwrap();
        let back_y = tape.slice_rows(cat, 3, 2).unwrap();
        assert_eq!(tape.value(back_x).values(), tape.value(x).values());
        assert_eq!(tape.value(back_y).values(), tape.value(y).values());

        let w = tape.constant(Tensor::from_fn(3, 1, |r, _| r as f64));
        let wide = tape.concat_cols(&[x, w]).unwrap();
        let back = tape.slice_cols(wide, 0, 2).unwrap();
        assert_eq!(tape.value(back).values(), tape.value(x).values());
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 2));
        let b = tape.constant(Tensor::zeros(2, 3));
        assert!(matches!(tape.add(a, b), Err(DiffError::Shape { op: "add", .. })));
        assert!(tape.concat_rows(&[a, b]).is_err());
    }

    #[test]
    fn parameter_used_twice_accumulates() {
        // f(x) = sum(x ⊙ x) via matmul of xᵀx diag: use x·xᵀ trace-like sum.
        let mut tape = Tape::new();
        let x = tape.param(t(&[vec![1.0, 2.0, 3.0]]));
        let a = tape.scale(x, 2.0);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(
            tape.backward(x),
            Err(DiffError::NotScalar { shape: (2, 2) })
        ));
    }

    #[test]
    fn unreachable_params_get_no_grad_and_constants_never_do() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::filled(1, 2, 1.0));
        let unused = tape.param(Tensor::filled(1, 2, 1.0));
        let c = tape.constant(Tensor::filled(1, 2, 3.0));
        let y = tape.add(p, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(p).is_some());
        assert!(tape.grad(unused).is_none());
        assert!(tape.grad(c).is_none());
    }
}
