//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node index is already a topological order and
//! `backward` is a single reverse sweep. Parameters live outside the tape in
//! [`Param`] slots; their gradients are copied out after the sweep and the
//! tape is dropped.
//!
//! Gradients accumulate (`+=`). Calling `backward` twice on the same tape adds
//! the contributions twice; [`Tape::zero_grad`] resets them. The same rule lets
//! the hybrid model seed a node with an externally computed gradient through
//! [`Tape::backward_with_seed`].

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("seed gradient shape {seed:?} does not match node shape {node:?}")]
    SeedShape { seed: Vec<usize>, node: Vec<usize> },
    #[error("optimizer step count must be >= 1, got {0}")]
    StepCount(u64),
    #[error("optimizer received {params} parameters but holds state for {state}")]
    ParamCount { params: usize, state: usize },
    #[error("{op}: column range {start}..{end} out of bounds for {cols} columns")]
    ColumnRange {
        op: &'static str,
        start: usize,
        end: usize,
        cols: usize,
    },
    #[error("gather_rows: row index {index} out of bounds for {rows} rows")]
    RowIndex { index: usize, rows: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, `[m, n] -> [1, n]`.
    Rows,
    /// Reduce over columns, `[m, n] -> [m, 1]`.
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Mean(Var, Axis),
    Sum(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn param(&mut self, p: &Param) -> Var {
        self.leaf(p.value.clone())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name }.into());
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        TensorError::Shape {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
        .into()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(self.shape_err("add", a, b));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// `[m, n] + [1, n]`, the row is broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("add_row")?;
        let (r, n2) = self.value(row).dims2("add_row")?;
        if r != 1 || n != n2 {
            return Err(self.shape_err("add_row", a, row));
        }
        let mut out = self.value(a).clone();
        let rv = self.value(row).data().to_vec();
        for i in 0..m {
            for (o, b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&rv) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.value(a).same_shape(self.value(b)) {
            return Err(self.shape_err("mul", a, b));
        }
        let bv = self.value(b).data();
        let data = self.value(a).data().iter().zip(bv).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    /// Row-wise softmax with the row maximum subtracted first.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.dims2("softmax_rows")?;
        let mut out = x.clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            softmax_in_place(row);
        }
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.dims2("mean")?;
        let out = match axis {
            Axis::Rows => {
                let mut acc = vec![0.0; n];
                for i in 0..m {
                    for (s, v) in acc.iter_mut().zip(&x.data()[i * n..(i + 1) * n]) {
                        *s += v;
                    }
                }
                acc.iter_mut().for_each(|s| *s /= m as f64);
                Tensor::new(vec![1, n], acc)?
            }
            Axis::Cols => {
                let acc = (0..m)
                    .map(|i| x.data()[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
                    .collect();
                Tensor::new(vec![m, 1], acc)?
            }
        };
        self.push("mean", out, Op::Mean(a, axis), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    /// Concatenate along columns; every part must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Rank {
            op: "concat_cols",
            shape: vec![],
        })?;
        let (m, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.value(p).dims2("concat_cols")?;
            if mp != m {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(&[m, total]);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out.data_mut()[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2("slice_cols")?;
        if start + len > n {
            return Err(AutodiffError::ColumnRange {
                op: "slice_cols",
                start,
                end: start + len,
                cols: n,
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        self.push("slice_cols", out, Op::SliceCols(a, start, len), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(a).dims2("gather_rows")?;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(AutodiffError::RowIndex { index: r, rows: m });
            }
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        self.push("gather_rows", out, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    /// Backpropagate from a scalar root, seeding it with 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.value(root).shape().to_vec();
        if !self.value(root).is_scalar() {
            return Err(AutodiffError::NonScalarRoot(shape));
        }
        self.backward_with_seed(root, &Tensor::full(&shape, 1.0))
    }

    /// Backpropagate `seed` as the upstream gradient of `root`.
    pub fn backward_with_seed(&mut self, root: Var, seed: &Tensor) -> Result<()> {
        if !seed.same_shape(self.value(root)) {
            return Err(AutodiffError::SeedShape {
                seed: seed.shape().to_vec(),
                node: self.value(root).shape().to_vec(),
            });
        }
        let mut local: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        local[root.0] = Some(seed.clone());

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = local[idx].take() else { continue };
            self.propagate(idx, &g, &mut local)?;
            self.nodes[idx].grad.add_assign(&g)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, local: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contrib: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut local[v.0] {
                Some(acc) => acc.add_assign(&contrib)?,
                slot @ None => *slot = Some(contrib),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    send(*a, g.matmul(&bv.transpose()?)?)?;
                }
                if self.requires_grad(*b) {
                    send(*b, av.transpose()?.matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone())?;
                let (m, n) = g.dims2("add_row")?;
                let mut acc = vec![0.0; n];
                for i in 0..m {
                    for (s, v) in acc.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                        *s += v;
                    }
                }
                send(*row, Tensor::new(vec![1, n], acc)?)?;
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let shape = g.shape().to_vec();
                let ga = g.data().iter().zip(bv).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(av).map(|(x, y)| x * y).collect();
                send(*a, Tensor::new(shape.clone(), ga)?)?;
                send(*b, Tensor::new(shape, gb)?)?;
            }
            Op::Scale(a, c) => send(*a, g.map(|v| v * c))?,
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let data = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                send(*a, Tensor::new(g.shape().to_vec(), data)?)?;
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let data = g.data().iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                send(*a, Tensor::new(g.shape().to_vec(), data)?)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (m, n) = y.dims2("softmax_rows")?;
                let mut out = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let yr = &y.data()[i * n..(i + 1) * n];
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out.data_mut()[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*a, out)?;
            }
            Op::Mean(a, axis) => {
                let (m, n) = self.value(*a).dims2("mean")?;
                let mut out = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for j in 0..n {
                        let v = match axis {
                            Axis::Rows => g.data()[j] / m as f64,
                            Axis::Cols => g.data()[i] / n as f64,
                        };
                        out.data_mut()[i * n + j] = v;
                    }
                }
                send(*a, out)?;
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                send(*a, Tensor::full(self.value(*a).shape(), gv))?;
            }
            Op::Transpose(a) => send(*a, g.transpose()?)?,
            Op::ConcatCols(parts) => {
                let (m, total) = g.dims2("concat_cols")?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2("concat_cols")?;
                    let mut data = Vec::with_capacity(m * w);
                    for i in 0..m {
                        data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    send(p, Tensor::new(vec![m, w], data)?)?;
                    offset += w;
                }
            }
            Op::SliceCols(a, start, len) => {
                let (m, n) = self.value(*a).dims2("slice_cols")?;
                let mut out = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    out.data_mut()[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                send(*a, out)?;
            }
            Op::GatherRows(a, rows) => {
                let (m, n) = self.value(*a).dims2("gather_rows")?;
                let mut out = Tensor::zeros(&[m, n]);
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..n {
                        out.data_mut()[src * n + j] += g.data()[r * n + j];
                    }
                }
                send(*a, out)?;
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
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

/// A trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment optimizer. Moment buffers are created on
/// the first step and persist for the lifetime of the optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Apply step `t` (1-based) using the gradients currently held by `params`.
    pub fn step(&mut self, params: &mut [Param], t: u64) -> Result<()> {
        if t < 1 {
            return Err(AutodiffError::StepCount(t));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(AutodiffError::ParamCount {
                params: params.len(),
                state: self.first.len(),
            });
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(t as i32);
        let c2 = 1.0 - beta2.powi(t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad.data();
            let m = m.data_mut();
            let v = v.data_mut();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
