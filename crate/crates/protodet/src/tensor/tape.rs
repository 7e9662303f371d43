//! Reverse-mode differentiation on a per-step tape.
//!
//! The tape is rebuilt for every training step: nodes are appended in
//! topological order during the forward pass, and `backward` sweeps the node
//! list once in reverse. Two barriers make gradient isolation a structural
//! property rather than a numerical one:
//!
//! * a `StopGrad` node forwards its value unchanged but discards every
//!   adjoint sent to it, so its ancestors receive exactly 0.0;
//! * leaf tensors with `requires_grad == false` never accumulate, so detached
//!   constants (the prototype matrix, teacher targets) stay out of every
//!   gradient by construction.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{matmul_slices, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad,
    Add,
    AddRow,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddConst,
    MatMul,
    Transpose,
    Tanh,
    Sigmoid,
    Relu,
    Abs,
    LnClamped(f64),
    SoftmaxRows(f64),
    LogSoftmaxRows,
    LayerNorm(f64),
    NormalizeRows,
    SumAll,
    GatherRows(Vec<usize>),
    GatherElems(Vec<(usize, usize)>),
    Column(usize),
    EMin,
    EMax,
    ConcatCols,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

/// Computation graph for one forward/backward pass. Single-threaded.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: Tensor) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::Numeric("operation produced NaN/Inf".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs, value, grad: None });
        Ok(Var { tape: self, index: nodes.len() - 1 })
    }

    /// Leaf that never accumulates gradient (a detached constant).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let value = value.with_requires_grad(false);
        self.push(Op::Leaf, vec![], value).expect("finite leaf")
    }

    /// Leaf that accumulates gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let value = value.with_requires_grad(true);
        self.push(Op::Leaf, vec![], value).expect("finite leaf")
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, var: Var<'_>) -> Tensor {
        self.nodes.borrow()[var.index].value.clone()
    }

    /// Gradient accumulated at `var` by the last `backward`; zeros if none.
    pub fn grad(&self, var: Var<'_>) -> Tensor {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.index];
        match &node.grad {
            Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g.clone()),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss. Each node is visited exactly once.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        {
            let loss_node = &nodes[loss.index];
            if !loss_node.value.is_scalar() {
                return Err(Error::Contract(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    loss_node.value.shape()
                )));
            }
        }
        nodes[loss.index].grad = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let g = match nodes[i].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            if nodes[i].inputs.is_empty() {
                continue;
            }
            let op = nodes[i].op.clone();
            let inputs = nodes[i].inputs.clone();
            let out_val = nodes[i].value.clone();
            let in_vals: Vec<Tensor> = inputs.iter().map(|&j| nodes[j].value.clone()).collect();
            let adjoints = op_backward(&op, &in_vals, &out_val, &g);
            debug_assert_eq!(adjoints.len(), inputs.len());
            for (&j, adj) in inputs.iter().zip(adjoints) {
                let adj = match adj {
                    Some(a) => a,
                    None => continue,
                };
                let target = &mut nodes[j];
                let blocked = matches!(target.op, Op::StopGrad)
                    || (matches!(target.op, Op::Leaf) && !target.value.requires_grad());
                if blocked {
                    continue;
                }
                match &mut target.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&adj) {
                            *a += b;
                        }
                    }
                    None => target.grad = Some(adj),
                }
            }
        }
        Ok(())
    }

    /// Runs `backward` and returns one gradient tensor per listed parameter,
    /// with exact zeros for parameters the loss never reaches.
    pub fn gradients(&self, loss: Var<'_>, params: &[Var<'_>]) -> Result<Vec<Tensor>> {
        self.backward(loss)?;
        Ok(params.iter().map(|p| self.grad(*p)).collect())
    }

    /// Column-concatenates matrices sharing a row count.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols of nothing".into()));
        }
        let vals: Vec<Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let (rows, _) = vals[0].dims2()?;
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            let (r, c) = v.dims2()?;
            if r != rows {
                return Err(Error::Dimension("concat_cols row counts disagree".into()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        for i in 0..rows {
            let mut off = 0;
            for (v, &w) in vals.iter().zip(&widths) {
                data[i * total + off..i * total + off + w].copy_from_slice(v.row(i));
                off += w;
            }
        }
        self.push(
            Op::ConcatCols,
            parts.iter().map(|p| p.index).collect(),
            Tensor::from_parts(vec![rows, total], data),
        )
    }
}

/// Rows/cols view treating 1-D tensors as a single row.
fn row_view(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (1, t.numel()),
    }
}

impl<'t> Var<'t> {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn grad(&self) -> Tensor {
        self.tape.grad(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(&self, op: Op, value: Tensor) -> Result<Var<'t>> {
        self.tape.push(op, vec![self.index], value)
    }

    fn binary(&self, other: Var<'t>, op: Op, value: Tensor) -> Result<Var<'t>> {
        self.tape.push(op, vec![self.index, other.index], value)
    }

    /// Identity forward; discards all incoming adjoints in backward.
    pub fn stop_gradient(&self) -> Var<'t> {
        let v = self.value();
        self.unary(Op::StopGrad, v).expect("finite identity")
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "add shapes disagree: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.binary(other, Op::Add, Tensor::from_parts(a.shape().to_vec(), data))
    }

    /// Adds a length-`d` bias row to every row of an `[n, d]` matrix.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), row.value());
        let (n, d) = a.dims2()?;
        if b.shape() != [d] {
            return Err(Error::Dimension(format!(
                "add_row wants bias of shape [{d}], got {:?}",
                b.shape()
            )));
        }
        let mut data = a.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += b.data()[j];
            }
        }
        self.binary(row, Op::AddRow, Tensor::from_parts(vec![n, d], data))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "sub shapes disagree: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.binary(other, Op::Sub, Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "mul shapes disagree: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.binary(other, Op::Mul, Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "div shapes disagree: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
        self.binary(other, Op::Div, Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn neg(&self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| -x).collect();
        self.unary(Op::Neg, Tensor::from_parts(a.shape().to_vec(), data))
            .expect("finite neg")
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * c).collect();
        self.unary(Op::Scale(c), Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn add_const(&self, c: f64) -> Result<Var<'t>> {
        let a = self.value();
        let data = a.data().iter().map(|x| x + c).collect();
        self.unary(Op::AddConst, Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dims disagree: {k} vs {k2}"
            )));
        }
        let data = matmul_slices(a.data(), b.data(), m, k, n);
        self.binary(other, Op::MatMul, Tensor::from_parts(vec![m, n], data))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.dims2()?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = a.data()[i * n + j];
            }
        }
        self.unary(Op::Transpose, Tensor::from_parts(vec![n, m], data))
    }

    pub fn tanh(&self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x.tanh()).collect();
        self.unary(Op::Tanh, Tensor::from_parts(a.shape().to_vec(), data))
            .expect("finite tanh")
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let a = self.value();
        let data = a
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        self.unary(Op::Sigmoid, Tensor::from_parts(a.shape().to_vec(), data))
            .expect("finite sigmoid")
    }

    pub fn relu(&self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x.max(0.0)).collect();
        self.unary(Op::Relu, Tensor::from_parts(a.shape().to_vec(), data))
            .expect("finite relu")
    }

    pub fn abs(&self) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x.abs()).collect();
        self.unary(Op::Abs, Tensor::from_parts(a.shape().to_vec(), data))
            .expect("finite abs")
    }

    /// `ln(max(x, floor))`; gradient is zero where the clamp engages.
    pub fn ln_clamped(&self, floor: f64) -> Result<Var<'t>> {
        if floor <= 0.0 {
            return Err(Error::Parameter("ln_clamped floor must be positive".into()));
        }
        let a = self.value();
        let data = a.data().iter().map(|x| x.max(floor).ln()).collect();
        self.unary(Op::LnClamped(floor), Tensor::from_parts(a.shape().to_vec(), data))
    }

    /// Row-wise `softmax(x / temperature)` with max-subtraction.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Var<'t>> {
        if temperature <= 0.0 {
            return Err(Error::Parameter(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let a = self.value();
        let (rows, cols) = row_view(&a);
        let mut data = vec![0.0; a.numel()];
        for i in 0..rows {
            let src = &a.data()[i * cols..(i + 1) * cols];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut data[i * cols..(i + 1) * cols];
            let mut sum = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = ((s - max) / temperature).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        self.unary(
            Op::SoftmaxRows(temperature),
            Tensor::from_parts(a.shape().to_vec(), data),
        )
    }

    /// Row-wise `x − logsumexp(x)`.
    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, cols) = row_view(&a);
        let mut data = vec![0.0; a.numel()];
        for i in 0..rows {
            let src = &a.data()[i * cols..(i + 1) * cols];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (d, s) in data[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        self.unary(Op::LogSoftmaxRows, Tensor::from_parts(a.shape().to_vec(), data))
    }

    /// Population layer normalization of a vector.
    pub fn layer_norm(&self, epsilon: f64) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape().len() != 1 {
            return Err(Error::Dimension("layer_norm expects a 1-D tensor".into()));
        }
        let out = crate::tensor::layer_norm(a.data(), epsilon)?;
        self.unary(Op::LayerNorm(epsilon), Tensor::from_parts(a.shape().to_vec(), out))
    }

    /// Unit-normalizes each row; errors on a (near-)zero row before dividing.
    pub fn normalize_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, cols) = row_view(&a);
        let mut data = vec![0.0; a.numel()];
        for i in 0..rows {
            let src = &a.data()[i * cols..(i + 1) * cols];
            let n = crate::tensor::norm(src);
            if n < 1e-12 {
                return Err(Error::Degenerate(format!(
                    "normalize_rows: row {i} has norm {n:e}"
                )));
            }
            for (d, s) in data[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                *d = s / n;
            }
        }
        self.unary(Op::NormalizeRows, Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn sum(&self) -> Var<'t> {
        let a = self.value();
        let s: f64 = a.data().iter().sum();
        self.unary(Op::SumAll, Tensor::scalar(s)).expect("finite sum")
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value().numel();
        if n == 0 {
            return Err(Error::Dimension("mean of empty tensor".into()));
        }
        self.sum().scale(1.0 / n as f64)
    }

    /// Selects rows of a 2-D tensor (duplicates allowed).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, cols) = a.dims2()?;
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!(
                "gather_rows index {bad} out of bounds for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(a.row(i));
        }
        self.unary(
            Op::GatherRows(indices.to_vec()),
            Tensor::from_parts(vec![indices.len(), cols], data),
        )
    }

    /// Selects single entries `(row, col)` of a 2-D tensor into a vector.
    pub fn gather_elems(&self, coords: &[(usize, usize)]) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, cols) = a.dims2()?;
        if coords.is_empty() {
            return Err(Error::Contract("gather_elems with no coordinates".into()));
        }
        if let Some(&(r, c)) = coords.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(Error::Dimension(format!(
                "gather_elems ({r},{c}) out of bounds for [{rows},{cols}]"
            )));
        }
        let data = coords.iter().map(|&(r, c)| a.data()[r * cols + c]).collect();
        self.unary(
            Op::GatherElems(coords.to_vec()),
            Tensor::from_parts(vec![coords.len()], data),
        )
    }

    /// Extracts column `j` of a 2-D tensor as a vector.
    pub fn column(&self, j: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, cols) = a.dims2()?;
        if j >= cols {
            return Err(Error::Dimension(format!(
                "column {j} out of bounds for {cols} columns"
            )));
        }
        let data = (0..rows).map(|i| a.data()[i * cols + j]).collect();
        self.unary(Op::Column(j), Tensor::from_parts(vec![rows], data))
    }

    pub fn emin(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Dimension("emin shapes disagree".into()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x.min(*y)).collect();
        self.binary(other, Op::EMin, Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn emax(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::Dimension("emax shapes disagree".into()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x.max(*y)).collect();
        self.binary(other, Op::EMax, Tensor::from_parts(a.shape().to_vec(), data))
    }
}

/// One adjoint (or `None`) per input, in input order.
fn op_backward(
    op: &Op,
    inputs: &[Tensor],
    out: &Tensor,
    g: &[f64],
) -> Vec<Option<Vec<f64>>> {
    match op {
        Op::Leaf => vec![],
        Op::StopGrad => vec![None],
        Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::AddRow => {
            let (n, d) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let mut row = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    row[j] += g[i * d + j];
                }
            }
            vec![Some(g.to_vec()), Some(row)]
        }
        Op::Sub => vec![
            Some(g.to_vec()),
            Some(g.iter().map(|x| -x).collect()),
        ],
        Op::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            vec![
                Some(g.iter().zip(b.data()).map(|(x, y)| x * y).collect()),
                Some(g.iter().zip(a.data()).map(|(x, y)| x * y).collect()),
            ]
        }
        Op::Div => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let da = g.iter().zip(b.data()).map(|(x, y)| x / y).collect();
            let db = g
                .iter()
                .zip(a.data().iter().zip(b.data()))
                .map(|(gi, (ai, bi))| -gi * ai / (bi * bi))
                .collect();
            vec![Some(da), Some(db)]
        }
        Op::Neg => vec![Some(g.iter().map(|x| -x).collect())],
        Op::Scale(c) => vec![Some(g.iter().map(|x| x * c).collect())],
        Op::AddConst => vec![Some(g.to_vec())],
        Op::MatMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            // dA = G · Bᵀ
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += g[i * n + j] * b.data()[p * n + j];
                    }
                    da[i * k + p] = s;
                }
            }
            // dB = Aᵀ · G
            let mut db = vec![0.0; k * n];
            for p in 0..k {
                for j in 0..n {
                    let mut s = 0.0;
                    for i in 0..m {
                        s += a.data()[i * k + p] * g[i * n + j];
                    }
                    db[p * n + j] = s;
                }
            }
            vec![Some(da), Some(db)]
        }
        Op::Transpose => {
            let (m, n) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            // out is n×m; transpose g back to m×n
            let mut da = vec![0.0; m * n];
            for i in 0..n {
                for j in 0..m {
                    da[j * n + i] = g[i * m + j];
                }
            }
            vec![Some(da)]
        }
        Op::Tanh => vec![Some(
            g.iter().zip(out.data()).map(|(gi, y)| gi * (1.0 - y * y)).collect(),
        )],
        Op::Sigmoid => vec![Some(
            g.iter().zip(out.data()).map(|(gi, y)| gi * y * (1.0 - y)).collect(),
        )],
        Op::Relu => vec![Some(
            g.iter()
                .zip(inputs[0].data())
                .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                .collect(),
        )],
        Op::Abs => vec![Some(
            g.iter()
                .zip(inputs[0].data())
                .map(|(gi, x)| gi * x.signum() * if *x == 0.0 { 0.0 } else { 1.0 })
                .collect(),
        )],
        Op::LnClamped(floor) => vec![Some(
            g.iter()
                .zip(inputs[0].data())
                .map(|(gi, x)| if *x > *floor { gi / x } else { 0.0 })
                .collect(),
        )],
        Op::SoftmaxRows(temp) => {
            let (rows, cols) = row_view(&inputs[0]);
            let mut da = vec![0.0; g.len()];
            for i in 0..rows {
                let y = &out.data()[i * cols..(i + 1) * cols];
                let gr = &g[i * cols..(i + 1) * cols];
                let inner: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    da[i * cols + j] = y[j] * (gr[j] - inner) / temp;
                }
            }
            vec![Some(da)]
        }
        Op::LogSoftmaxRows => {
            let (rows, cols) = row_view(&inputs[0]);
            let mut da = vec![0.0; g.len()];
            for i in 0..rows {
                let y = &out.data()[i * cols..(i + 1) * cols];
                let gr = &g[i * cols..(i + 1) * cols];
                let gsum: f64 = gr.iter().sum();
                for j in 0..cols {
                    da[i * cols + j] = gr[j] - y[j].exp() * gsum;
                }
            }
            vec![Some(da)]
        }
        Op::LayerNorm(eps) => {
            let x = inputs[0].data();
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let denom = (var + eps).sqrt();
            let y = out.data();
            let g_mean = g.iter().sum::<f64>() / n;
            let gy_mean = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
            let da = g
                .iter()
                .zip(y)
                .map(|(gi, yi)| (gi - g_mean - yi * gy_mean) / denom)
                .collect();
            vec![Some(da)]
        }
        Op::NormalizeRows => {
            let (rows, cols) = row_view(&inputs[0]);
            let mut da = vec![0.0; g.len()];
            for i in 0..rows {
                let x = &inputs[0].data()[i * cols..(i + 1) * cols];
                let y = &out.data()[i * cols..(i + 1) * cols];
                let gr = &g[i * cols..(i + 1) * cols];
                let n = crate::tensor::norm(x);
                let gy: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    da[i * cols + j] = (gr[j] - y[j] * gy) / n;
                }
            }
            vec![Some(da)]
        }
        Op::SumAll => vec![Some(vec![g[0]; inputs[0].numel()])],
        Op::GatherRows(indices) => {
            let (rows, cols) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let mut da = vec![0.0; rows * cols];
            for (k, &i) in indices.iter().enumerate() {
                for j in 0..cols {
                    da[i * cols + j] += g[k * cols + j];
                }
            }
            vec![Some(da)]
        }
        Op::GatherElems(coords) => {
            let (rows, cols) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let mut da = vec![0.0; rows * cols];
            for (k, &(r, c)) in coords.iter().enumerate() {
                da[r * cols + c] += g[k];
            }
            vec![Some(da)]
        }
        Op::Column(j) => {
            let (rows, cols) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let mut da = vec![0.0; rows * cols];
            for i in 0..rows {
                da[i * cols + j] = g[i];
            }
            vec![Some(da)]
        }
        Op::EMin => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let mut da = vec![0.0; g.len()];
            let mut db = vec![0.0; g.len()];
            for (k, gi) in g.iter().enumerate() {
                // ties route to the first operand
                if a.data()[k] <= b.data()[k] {
                    da[k] = *gi;
                } else {
                    db[k] = *gi;
                }
            }
            vec![Some(da), Some(db)]
        }
        Op::EMax => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let mut da = vec![0.0; g.len()];
            let mut db = vec![0.0; g.len()];
            for (k, gi) in g.iter().enumerate() {
                if a.data()[k] >= b.data()[k] {
                    da[k] = *gi;
                } else {
                    db[k] = *gi;
                }
            }
            vec![Some(da), Some(db)]
        }
        Op::ConcatCols => {
            let total: usize = inputs.iter().map(|v| v.shape()[1]).sum();
            let rows = inputs[0].shape()[0];
            let mut adjoints = Vec::with_capacity(inputs.len());
            let mut off = 0;
            for v in inputs {
                let w = v.shape()[1];
                let mut da = vec![0.0; rows * w];
                for i in 0..rows {
                    da[i * w..(i + 1) * w]
                        .copy_from_slice(&g[i * total + off..i * total + off + w]);
                }
                adjoints.push(Some(da));
                off += w;
            }
            adjoints
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_grad_fn;
    use approx::assert_abs_diff_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_parts(shape, data)
    }

    #[test]
    fn stop_gradient_forward_is_bit_identical() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.3, -1.7, 2.5]));
        let y = x.stop_gradient();
        assert_eq!(x.value().data(), y.value().data());
    }

    #[test]
    fn stop_gradient_blocks_exactly() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.5, 1.5]));
        let w = tape.param(Tensor::vector(vec![2.0, -1.0]));
        let y = x.stop_gradient().mul(w).unwrap().sum();
        tape.backward(y).unwrap();
        // dL/dx is exactly zero, dL/dw is the (constant) value of x.
        assert_eq!(x.grad().data(), &[0.0, 0.0]);
        assert_eq!(w.grad().data(), &[0.5, 1.5]);
    }

    #[test]
    fn constant_leaves_never_accumulate() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let w = tape.param(Tensor::vector(vec![1.0, 1.0]));
        let y = c.mul(w).unwrap().sum();
        tape.backward(y).unwrap();
        assert_eq!(c.grad().data(), &[0.0, 0.0]);
        assert_eq!(w.grad().data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(crate::error::Error::Contract(_))));
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = tape.scalar(5.0);
        let grads = tape.gradients(loss, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn unreachable_params_get_exact_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let z = tape.param(Tensor::vector(vec![9.0]));
        let loss = x.mul(x).unwrap().sum();
        let grads = tape.gradients(loss, &[x, z]).unwrap();
        assert_eq!(grads[0].data(), &[2.0, 4.0]);
        assert_eq!(grads[1].data(), &[0.0]);
    }

    #[test]
    fn matmul_backward_matches_transpose_rule() {
        // d/dA sum(A·B) = 1·Bᵀ replicated over rows.
        let tape = Tape::new();
        let a = tape.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let loss = a.matmul(b).unwrap().sum();
        tape.backward(loss).unwrap();
        // row sums of B: [11, 15]
        assert_eq!(a.grad().data(), &[11.0, 15.0, 11.0, 15.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.param(Tensor::vector(vec![0.37, -0.9, 1.22, 0.05]));
            let w = tape.param(Tensor::vector(vec![1.5, 2.5, -0.5, 0.25]));
            let h = x.mul(w).unwrap().tanh();
            let p = h.softmax_rows(0.5).unwrap();
            let loss = p.ln_clamped(1e-12).unwrap().mul(p).unwrap().sum().neg();
            tape.backward(loss).unwrap();
            (x.grad().data().to_vec(), w.grad().data().to_vec())
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn softmax_kl_gradient_matches_hand_jacobian() {
        // loss = KL(softmax(x) || q) for fixed q on a 3-vector; chaining the
        // softmax Jacobian p_k(δ_jk − p_j) through the KL integrand gives
        // dL/dx_k = p_k·((ln p_k − ln q_k) − KL).
        let x0 = vec![0.2, -0.4, 0.9];
        let q = [0.5f64, 0.3, 0.2];
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(x0.clone()));
        let p = x.softmax_rows(1.0).unwrap();
        let lnq = tape.constant(Tensor::vector(q.iter().map(|v| v.ln()).collect()));
        let loss = p
            .ln_clamped(1e-12)
            .unwrap()
            .sub(lnq)
            .unwrap()
            .mul(p)
            .unwrap()
            .sum();
        tape.backward(loss).unwrap();
        let pv = p.value();
        let got = x.grad();
        let kl: f64 = pv
            .data()
            .iter()
            .zip(&q)
            .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
            .sum();
        for j in 0..3 {
            let expect = pv.data()[j] * ((pv.data()[j].ln() - q[j].ln()) - kl);
            assert_abs_diff_eq!(got.data()[j], expect, epsilon = 1e-10);
        }
    }

    /// Finite-difference sweep over every differentiable op.
    #[test]
    fn finite_differences_all_ops() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);

        // Each case: name, input shapes, graph builder returning a scalar.
        type Builder = for<'t> fn(&'t Tape, &[Var<'t>]) -> Var<'t>;
        let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
            ("add", vec![vec![3], vec![3]], |_, v| {
                v[0].add(v[1]).unwrap().sum()
            }),
            ("add_row", vec![vec![2, 3], vec![3]], |_, v| {
                v[0].add_row(v[1]).unwrap().tanh().sum()
            }),
            ("sub_mul", vec![vec![4], vec![4]], |_, v| {
                v[0].sub(v[1]).unwrap().mul(v[0]).unwrap().sum()
            }),
            ("div", vec![vec![3], vec![3]], |_, v| {
                v[0].div(v[1]).unwrap().sum()
            }),
            ("neg_scale", vec![vec![3]], |_, v| {
                v[0].neg().scale(2.5).unwrap().sum()
            }),
            ("matmul", vec![vec![2, 3], vec![3, 2]], |_, v| {
                v[0].matmul(v[1]).unwrap().tanh().sum()
            }),
            ("transpose", vec![vec![2, 3]], |_, v| {
                v[0].transpose().unwrap().tanh().sum()
            }),
            ("sigmoid", vec![vec![5]], |_, v| v[0].sigmoid().sum()),
            ("abs", vec![vec![5]], |_, v| v[0].abs().sum()),
            ("softmax_rows", vec![vec![2, 4]], |_, v| {
                let p = v[0].softmax_rows(0.37).unwrap();
                p.mul(p).unwrap().sum()
            }),
            ("log_softmax_rows", vec![vec![2, 4]], |_, v| {
                let p = v[0].log_softmax_rows().unwrap();
                p.mul(p).unwrap().sum()
            }),
            ("layer_norm", vec![vec![6]], |_, v| {
                let y = v[0].layer_norm(1e-5).unwrap();
                y.mul(y).unwrap().tanh().sum()
            }),
            ("normalize_rows", vec![vec![2, 4]], |_, v| {
                v[0].normalize_rows().unwrap().tanh().sum()
            }),
            ("gather", vec![vec![3, 4]], |_, v| {
                v[0].gather_rows(&[2, 0]).unwrap().sum()
            }),
            ("gather_elems", vec![vec![3, 4]], |_, v| {
                v[0].gather_elems(&[(0, 1), (2, 3)]).unwrap().sum()
            }),
            ("column", vec![vec![3, 4]], |_, v| {
                v[0].column(2).unwrap().tanh().sum()
            }),
            ("emin_emax", vec![vec![4], vec![4]], |_, v| {
                let lo = v[0].emin(v[1]).unwrap();
                let hi = v[0].emax(v[1]).unwrap();
                lo.mul(hi).unwrap().sum()
            }),
            ("concat_cols", vec![vec![2, 2], vec![2, 3]], |t, v| {
                t.concat_cols(&[v[0], v[1]]).unwrap().tanh().sum()
            }),
            ("ln_clamped", vec![vec![4]], |_, v| {
                v[0].abs().add_const(0.5).unwrap().ln_clamped(1e-12).unwrap().sum()
            }),
        ];

        for (name, shapes, build) in cases {
            let tensors: Vec<Tensor> =
                shapes.iter().map(|s| rand_tensor(&mut rng, s.clone())).collect();
            let worst = check_grad_fn(&tensors, |tape, vars| build(tape, vars));
            assert!(
                worst < 1e-4,
                "op {name}: worst relative FD error {worst:e} >= 1e-4"
            );
        }
    }

    #[test]
    fn relu_gradient_masks_negatives() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 2.0, -3.0, 4.0]));
        let loss = x.relu().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().data(), &[0.0, 1.0, 0.0, 1.0]);
    }
}
