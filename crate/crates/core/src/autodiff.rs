//! Dense `f64` tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive operation of a forward pass in
//! execution order; [`Graph::backward`] replays the tape in reverse, applying
//! each operation's vector-Jacobian product and accumulating gradients into
//! every node that requires them. One graph lives for one forward/backward
//! pass and is consumed by `backward`.
//!
//! Broadcasting is deliberately narrow: scalar-with-tensor and
//! row-vector-with-matrix for the elementwise binaries, plus explicit
//! column-vector variants ([`Graph::mul_colvec`], [`Graph::div_colvec`]) where
//! per-row scaling is needed. Anything richer is unnecessary here.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// Norm below which the l2-norm backward falls back to a zero subgradient.
const NORM_GRAD_FLOOR: f64 = 1e-300;

// ── Tensor ───────────────────────────────────────────────────────────

/// Dense real-valued array, row-major. Scalars are shape `[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Marks a leaf whose gradient should be produced by `backward`.
    pub requires_grad: bool,
    /// Written by the training loop after `backward`; same layout as `data`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x], requires_grad: false, grad: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor { shape: vec![n], data, requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count for matrices; vectors are a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 { self.shape[0] } else { 1 }
    }

    /// Column count for matrices; vector length otherwise.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 { self.shape[1] } else { self.numel() }
    }

    /// Surface the NaN/Inf failure state as a checkable error.
    pub fn validate_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(CoreError::NonFinite {
                op: "tensor",
                detail: format!("element {i} is {}", self.data[i]),
            }),
        }
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    ConcatRows { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    MulColVec { m: NodeId, v: NodeId },
    DivColVec { m: NodeId, v: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    Relu { x: NodeId },
    Softplus { x: NodeId },
    Neg { x: NodeId },
    Scale { x: NodeId, c: f64 },
    Shift { x: NodeId },
    Sum { x: NodeId, axis: Option<usize> },
    Mean { x: NodeId, axis: Option<usize> },
    L2Norm { x: NodeId, axis: Option<usize> },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::ConcatRows { .. } => "concat_rows",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Div { .. } => "div",
        Op::MulColVec { .. } => "mul_colvec",
        Op::DivColVec { .. } => "div_colvec",
        Op::Exp { .. } => "exp",
        Op::Log { .. } => "log",
        Op::Relu { .. } => "relu",
        Op::Softplus { .. } => "softplus",
        Op::Neg { .. } => "neg",
        Op::Scale { .. } => "scale",
        Op::Shift { .. } => "shift",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::L2Norm { .. } => "l2_norm",
    }
}

/// How the shapes of a binary elementwise op line up.
#[derive(Clone, Copy, PartialEq)]
enum BinLayout {
    /// Identical shapes.
    Same,
    /// Left operand is a single scalar.
    ScalarLhs,
    /// Right operand is a single scalar.
    ScalarRhs,
    /// Left is `[m, n]`, right is a length-`n` row vector.
    RowRhs,
}

/// Recorded forward pass: values, producing ops, and gradient accumulators.
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.values[id.0].numel(), 1);
        self.values[id.0].data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient of a node, zeros if no gradient flowed to it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.values[id.0].numel()],
        }
    }

    /// Smallest `|input|` feeding any relu on the tape; infinity when the
    /// tape has none. Finite-difference checks are invalid near the kink,
    /// so gradient tests reject instances with a small margin.
    pub fn relu_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for op in &self.ops {
            if let Op::Relu { x } = op {
                for &v in &self.values[x.0].data {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }

    /// First node holding a NaN/Inf, in tape order, with its producing op.
    pub fn first_nonfinite(&self) -> Option<(&'static str, NodeId)> {
        self.values
            .iter()
            .position(|t| t.data.iter().any(|x| !x.is_finite()))
            .map(|i| (op_name(&self.ops[i]), NodeId(i)))
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        id
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(CoreError::Contract(String::from(
                "tape already consumed by backward; build a fresh graph",
            )))
        } else {
            Ok(())
        }
    }

    /// Record a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Record a leaf, honoring `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let req = t.requires_grad;
        self.push(t, Op::Leaf, req)
    }

    /// Snapshot a parameter tensor as a gradient-requiring leaf.
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        let mut copy = t.clone();
        copy.requires_grad = true;
        self.push(copy, Op::Leaf, true)
    }

    /// Copy this node's gradient into the `grad` field of `target`.
    pub fn write_grad_into(&self, id: NodeId, target: &mut Tensor) {
        target.grad = Some(self.grad_or_zeros(id));
    }

    // ── Binary elementwise ───────────────────────────────────────────

    fn bin_layout(&self, a: NodeId, b: NodeId) -> Result<BinLayout> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape == tb.shape {
            Ok(BinLayout::Same)
        } else if tb.numel() == 1 {
            Ok(BinLayout::ScalarRhs)
        } else if ta.numel() == 1 {
            Ok(BinLayout::ScalarLhs)
        } else if ta.shape.len() == 2 && tb.shape.len() <= 2 && tb.numel() == ta.shape[1] {
            Ok(BinLayout::RowRhs)
        } else {
            Err(CoreError::Dimension(format!(
                "shapes {:?} and {:?} are not broadcast-compatible",
                ta.shape, tb.shape
            )))
        }
    }

    fn bin_forward(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.check_open()?;
        let layout = self.bin_layout(a, b)?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let data: Vec<f64> = match layout {
            BinLayout::Same => ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
            BinLayout::ScalarRhs => {
                let y = tb.data[0];
                ta.data.iter().map(|&x| f(x, y)).collect()
            }
            BinLayout::ScalarLhs => {
                let x = ta.data[0];
                tb.data.iter().map(|&y| f(x, y)).collect()
            }
            BinLayout::RowRhs => {
                let n = ta.shape[1];
                ta.data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, tb.data[i % n]))
                    .collect()
            }
        };
        let shape = match layout {
            BinLayout::ScalarLhs => tb.shape.clone(),
            _ => ta.shape.clone(),
        };
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::new(shape, data)?, op, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bin_forward(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bin_forward(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.bin_forward(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[b.0].data.contains(&0.0) {
            return Err(CoreError::Domain(String::from("division by zero")));
        }
        self.bin_forward(a, b, |x, y| x / y, Op::Div { a, b })
    }

    // ── Unary elementwise ────────────────────────────────────────────

    fn unary_forward(
        &mut self,
        x: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.check_open()?;
        let tx = &self.values[x.0];
        let data: Vec<f64> = tx.data.iter().map(|&v| f(v)).collect();
        let t = Tensor::new(tx.shape.clone(), data)?;
        let req = self.requires[x.0];
        Ok(self.push(t, op, req))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_forward(x, libm::exp, Op::Exp { x })
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if self.values[x.0].data.iter().any(|&v| v <= 0.0) {
            return Err(CoreError::Domain(String::from(
                "log requires strictly positive arguments",
            )));
        }
        self.unary_forward(x, libm::log, Op::Log { x })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_forward(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x })
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_forward(x, softplus, Op::Softplus { x })
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary_forward(x, |v| -v, Op::Neg { x })
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary_forward(x, |v| v * c, Op::Scale { x, c })
    }

    /// Add a constant.
    pub fn shift(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary_forward(x, |v| v + c, Op::Shift { x })
    }

    // ── Matrix ops ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape.len() != 2 || tb.shape.len() != 2 {
            return Err(CoreError::Dimension(format!(
                "matmul needs two matrices, got {:?} and {:?}",
                ta.shape, tb.shape
            )));
        }
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (k2, n) = (tb.shape[0], tb.shape[1]);
        if k != k2 {
            return Err(CoreError::Dimension(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                ta.shape, tb.shape
            )));
        }
        let data = matmul_raw(&ta.data, &tb.data, m, k, n);
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::Matmul { a, b }, req))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let tx = &self.values[x.0];
        if tx.shape.len() != 2 {
            return Err(CoreError::Dimension(format!(
                "transpose needs a matrix, got {:?}",
                tx.shape
            )));
        }
        let (m, n) = (tx.shape[0], tx.shape[1]);
        let data = transpose_raw(&tx.data, m, n);
        let req = self.requires[x.0];
        Ok(self.push(Tensor::new(vec![n, m], data)?, Op::Transpose { x }, req))
    }

    /// Stack two matrices with equal column counts.
    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_open()?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(CoreError::Dimension(format!(
                "concat_rows needs matrices with equal columns, got {:?} and {:?}",
                ta.shape, tb.shape
            )));
        }
        let mut data = ta.data.clone();
        data.extend_from_slice(&tb.data);
        let shape = vec![ta.shape[0] + tb.shape[0], ta.shape[1]];
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows { a, b }, req))
    }

    /// Multiply row `i` of a matrix by `v[i]`.
    pub fn mul_colvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.colvec_check(m, v)?;
        let (tm, tv) = (&self.values[m.0], &self.values[v.0]);
        let n = tm.shape[1];
        let data: Vec<f64> = tm
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tv.data[i / n])
            .collect();
        let t = Tensor::new(tm.shape.clone(), data)?;
        let req = self.requires[m.0] || self.requires[v.0];
        Ok(self.push(t, Op::MulColVec { m, v }, req))
    }

    /// Divide row `i` of a matrix by `v[i]`.
    pub fn div_colvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        self.colvec_check(m, v)?;
        if self.values[v.0].data.contains(&0.0) {
            return Err(CoreError::Domain(String::from("division by zero row scale")));
        }
        let (tm, tv) = (&self.values[m.0], &self.values[v.0]);
        let n = tm.shape[1];
        let data: Vec<f64> = tm
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x / tv.data[i / n])
            .collect();
        let t = Tensor::new(tm.shape.clone(), data)?;
        let req = self.requires[m.0] || self.requires[v.0];
        Ok(self.push(t, Op::DivColVec { m, v }, req))
    }

    fn colvec_check(&self, m: NodeId, v: NodeId) -> Result<()> {
        self.check_open()?;
        let (tm, tv) = (&self.values[m.0], &self.values[v.0]);
        if tm.shape.len() != 2 || tv.numel() != tm.shape[0] {
            return Err(CoreError::Dimension(format!(
                "column-vector op needs [m, n] matrix and length-m vector, got {:?} and {:?}",
                tm.shape, tv.shape
            )));
        }
        Ok(())
    }

    // ── Reductions ───────────────────────────────────────────────────

    fn reduce_axis_check(&self, x: NodeId, axis: Option<usize>) -> Result<()> {
        self.check_open()?;
        let rank = self.values[x.0].shape.len();
        if let Some(ax) = axis {
            if rank > 2 {
                return Err(CoreError::Dimension(format!(
                    "axis reductions support rank <= 2, got rank {rank}"
                )));
            }
            if ax >= rank {
                return Err(CoreError::Dimension(format!(
                    "axis {ax} out of range for rank-{rank} tensor"
                )));
            }
        }
        Ok(())
    }

    fn reduce_sums(&self, x: NodeId, axis: Option<usize>) -> Tensor {
        let tx = &self.values[x.0];
        match effective_axis(&tx.shape, axis) {
            None => Tensor::scalar(tx.data.iter().sum()),
            Some(0) => {
                let (m, n) = (tx.shape[0], tx.shape[1]);
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] += tx.data[i * n + j];
                    }
                }
                Tensor::vector(out)
            }
            Some(_) => {
                let (m, n) = (tx.shape[0], tx.shape[1]);
                let out: Vec<f64> = (0..m)
                    .map(|i| tx.data[i * n..(i + 1) * n].iter().sum())
                    .collect();
                Tensor::vector(out)
            }
        }
    }

    /// Sum of all elements (`axis = None`) or along one axis of a matrix.
    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce_axis_check(x, axis)?;
        let t = self.reduce_sums(x, axis);
        let req = self.requires[x.0];
        Ok(self.push(t, Op::Sum { x, axis }, req))
    }

    /// Mean of all elements or along one axis of a matrix.
    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce_axis_check(x, axis)?;
        let count = self.reduce_count(x, axis);
        if count == 0 {
            return Err(CoreError::Contract(String::from("mean over an empty axis")));
        }
        let mut t = self.reduce_sums(x, axis);
        for v in t.data_mut() {
            *v /= count as f64;
        }
        let req = self.requires[x.0];
        Ok(self.push(t, Op::Mean { x, axis }, req))
    }

    /// Euclidean norm of all elements or of each row/column of a matrix.
    pub fn l2_norm(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        self.reduce_axis_check(x, axis)?;
        let tx = &self.values[x.0];
        let t = match effective_axis(&tx.shape, axis) {
            None => Tensor::scalar(libm::sqrt(tx.data.iter().map(|v| v * v).sum())),
            Some(0) => {
                let (m, n) = (tx.shape[0], tx.shape[1]);
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        out[j] += tx.data[i * n + j] * tx.data[i * n + j];
                    }
                }
                Tensor::vector(out.into_iter().map(libm::sqrt).collect())
            }
            Some(_) => {
                let (m, n) = (tx.shape[0], tx.shape[1]);
                let out: Vec<f64> = (0..m)
                    .map(|i| {
                        libm::sqrt(tx.data[i * n..(i + 1) * n].iter().map(|v| v * v).sum())
                    })
                    .collect();
                Tensor::vector(out)
            }
        };
        let req = self.requires[x.0];
        Ok(self.push(t, Op::L2Norm { x, axis }, req))
    }

    fn reduce_count(&self, x: NodeId, axis: Option<usize>) -> usize {
        let shape = &self.values[x.0].shape;
        match effective_axis(shape, axis) {
            None => self.values[x.0].numel(),
            Some(0) => shape[0],
            Some(_) => shape[1],
        }
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; consumes the tape.
    ///
    /// Afterwards every gradient-requiring node reachable from `loss` holds
    /// its gradient, readable via [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check_open()?;
        if self.values[loss.0].numel() != 1 {
            return Err(CoreError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss.0].shape
            )));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.requires[id] {
                continue;
            }
            let Some(g) = self.grads[id].clone() else { continue };
            let op = self.ops[id].clone();
            self.backward_op(NodeId(id), &op, &g)?;
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, contribution: Vec<f64>) {
        if !self.requires[id.0] {
            return;
        }
        debug_assert_eq!(contribution.len(), self.values[id.0].numel());
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backward_op(&mut self, out: NodeId, op: &Op, g: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let ta = &self.values[a.0];
                let tb = &self.values[b.0];
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if self.requires[a.0] {
                    // dA = g @ B^T
                    let bt = transpose_raw(&tb.data, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accum(a, da);
                }
                if self.requires[b.0] {
                    // dB = A^T @ g
                    let at = transpose_raw(&self.values[a.0].data, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accum(b, db);
                }
            }

            Op::Transpose { x } => {
                let out_shape = &self.values[out.0].shape;
                let (n, m) = (out_shape[0], out_shape[1]);
                self.accum(x, transpose_raw(g, n, m));
            }

            Op::ConcatRows { a, b } => {
                let na = self.values[a.0].numel();
                self.accum(a, g[..na].to_vec());
                self.accum(b, g[na..].to_vec());
            }

            Op::Add { a, b } => {
                self.binary_backward(a, b, g, |_, _| 1.0, |_, _| 1.0)?;
            }

            Op::Sub { a, b } => {
                self.binary_backward(a, b, g, |_, _| 1.0, |_, _| -1.0)?;
            }

            Op::Mul { a, b } => {
                self.binary_backward(a, b, g, |_, bi| bi, |ai, _| ai)?;
            }

            Op::Div { a, b } => {
                self.binary_backward(a, b, g, |_, bi| 1.0 / bi, |ai, bi| -ai / (bi * bi))?;
            }

            Op::MulColVec { m, v } => {
                let n = self.values[m.0].shape[1];
                if self.requires[m.0] {
                    let tv = &self.values[v.0];
                    let dm: Vec<f64> =
                        g.iter().enumerate().map(|(i, &gi)| gi * tv.data[i / n]).collect();
                    self.accum(m, dm);
                }
                if self.requires[v.0] {
                    let tm = &self.values[m.0];
                    let mut dv = vec![0.0; self.values[v.0].numel()];
                    for (i, &gi) in g.iter().enumerate() {
                        dv[i / n] += gi * tm.data[i];
                    }
                    self.accum(v, dv);
                }
            }

            Op::DivColVec { m, v } => {
                let n = self.values[m.0].shape[1];
                if self.requires[m.0] {
                    let tv = &self.values[v.0];
                    let dm: Vec<f64> =
                        g.iter().enumerate().map(|(i, &gi)| gi / tv.data[i / n]).collect();
                    self.accum(m, dm);
                }
                if self.requires[v.0] {
                    let tm = &self.values[m.0];
                    let tv = &self.values[v.0];
                    let mut dv = vec![0.0; tv.numel()];
                    for (i, &gi) in g.iter().enumerate() {
                        let s = tv.data[i / n];
                        dv[i / n] += -gi * tm.data[i] / (s * s);
                    }
                    self.accum(v, dv);
                }
            }

            Op::Exp { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.values[out.0].data)
                    .map(|(&gi, &oi)| gi * oi)
                    .collect();
                self.accum(x, dx);
            }

            Op::Log { x } => {
                let dx: Vec<f64> =
                    g.iter().zip(&self.values[x.0].data).map(|(&gi, &xi)| gi / xi).collect();
                self.accum(x, dx);
            }

            Op::Relu { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.values[x.0].data)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accum(x, dx);
            }

            Op::Softplus { x } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.values[x.0].data)
                    .map(|(&gi, &xi)| gi * sigmoid(xi))
                    .collect();
                self.accum(x, dx);
            }

            Op::Neg { x } => {
                self.accum(x, g.iter().map(|&gi| -gi).collect());
            }

            Op::Scale { x, c } => {
                self.accum(x, g.iter().map(|&gi| gi * c).collect());
            }

            Op::Shift { x, .. } => {
                self.accum(x, g.to_vec());
            }

            Op::Sum { x, axis } => {
                let dx = self.broadcast_reduction_grad(x, axis, g, 1.0);
                self.accum(x, dx);
            }

            Op::Mean { x, axis } => {
                let count = self.reduce_count(x, axis).max(1);
                let dx = self.broadcast_reduction_grad(x, axis, g, 1.0 / count as f64);
                self.accum(x, dx);
            }

            Op::L2Norm { x, axis } => {
                let tx = &self.values[x.0];
                let norms = &self.values[out.0].data;
                let dx: Vec<f64> = match effective_axis(&tx.shape, axis) {
                    None => {
                        let norm = norms[0];
                        let scale = if norm > NORM_GRAD_FLOOR { g[0] / norm } else { 0.0 };
                        tx.data.iter().map(|&xi| scale * xi).collect()
                    }
                    Some(0) => {
                        let n = tx.shape[1];
                        tx.data
                            .iter()
                            .enumerate()
                            .map(|(i, &xi)| {
                                let norm = norms[i % n];
                                if norm > NORM_GRAD_FLOOR { g[i % n] * xi / norm } else { 0.0 }
                            })
                            .collect()
                    }
                    Some(_) => {
                        let n = tx.shape[1];
                        tx.data
                            .iter()
                            .enumerate()
                            .map(|(i, &xi)| {
                                let norm = norms[i / n];
                                if norm > NORM_GRAD_FLOOR { g[i / n] * xi / norm } else { 0.0 }
                            })
                            .collect()
                    }
                };
                self.accum(x, dx);
            }
        }
        Ok(())
    }

    /// Shared VJP for elementwise binaries under all broadcast layouts.
    ///
    /// `dfa`/`dfb` are the partials of one output element w.r.t. its `a`/`b`
    /// inputs, as functions of those input values.
    fn binary_backward(
        &mut self,
        a: NodeId,
        b: NodeId,
        g: &[f64],
        dfa: impl Fn(f64, f64) -> f64,
        dfb: impl Fn(f64, f64) -> f64,
    ) -> Result<()> {
        let layout = self.bin_layout(a, b)?;
        let (da, db) = {
            let ta = &self.values[a.0];
            let tb = &self.values[b.0];
            let fetch = |i: usize| -> (f64, f64) {
                match layout {
                    BinLayout::Same => (ta.data[i], tb.data[i]),
                    BinLayout::ScalarLhs => (ta.data[0], tb.data[i]),
                    BinLayout::ScalarRhs => (ta.data[i], tb.data[0]),
                    BinLayout::RowRhs => (ta.data[i], tb.data[i % ta.shape[1]]),
                }
            };

            let da = if self.requires[a.0] {
                let mut da = vec![0.0; ta.numel()];
                for (i, &gi) in g.iter().enumerate() {
                    let (ai, bi) = fetch(i);
                    let contrib = gi * dfa(ai, bi);
                    match layout {
                        BinLayout::ScalarLhs => da[0] += contrib,
                        _ => da[i] = contrib,
                    }
                }
                Some(da)
            } else {
                None
            };
            let db = if self.requires[b.0] {
                let mut db = vec![0.0; tb.numel()];
                for (i, &gi) in g.iter().enumerate() {
                    let (ai, bi) = fetch(i);
                    let contrib = gi * dfb(ai, bi);
                    match layout {
                        BinLayout::Same | BinLayout::ScalarLhs => db[i] = contrib,
                        BinLayout::ScalarRhs => db[0] += contrib,
                        BinLayout::RowRhs => {
                            let n = tb.numel();
                            db[i % n] += contrib;
                        }
                    }
                }
                Some(db)
            } else {
                None
            };
            (da, db)
        };
        if let Some(da) = da {
            self.accum(a, da);
        }
        if let Some(db) = db {
            self.accum(b, db);
        }
        Ok(())
    }

    fn broadcast_reduction_grad(
        &self,
        x: NodeId,
        axis: Option<usize>,
        g: &[f64],
        factor: f64,
    ) -> Vec<f64> {
        let tx = &self.values[x.0];
        match effective_axis(&tx.shape, axis) {
            None => vec![g[0] * factor; tx.numel()],
            Some(0) => {
                let n = tx.shape[1];
                (0..tx.numel()).map(|i| g[i % n] * factor).collect()
            }
            Some(_) => {
                let n = tx.shape[1];
                (0..tx.numel()).map(|i| g[i / n] * factor).collect()
            }
        }
    }
}

/// Collapse `axis` for vectors (reducing a vector along axis 0 is a full
/// reduction) and report the effective matrix axis otherwise.
fn effective_axis(shape: &[usize], axis: Option<usize>) -> Option<usize> {
    match axis {
        None => None,
        Some(_) if shape.len() < 2 => None,
        Some(ax) => Some(ax),
    }
}

// ── Raw kernels ──────────────────────────────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_into(a, b, &mut out, m, k, n);
    out
}

/// Row range of the product; each output row depends on one `a` row only,
/// so splitting over rows is safe and bit-deterministic.
fn matmul_rows(a: &[f64], b: &[f64], out: &mut [f64], rows: core::ops::Range<usize>, k: usize, n: usize) {
    for i in rows {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
}

#[cfg(feature = "std")]
fn worker_count() -> usize {
    // available_parallelism re-reads cgroup limits on every call, which is
    // far too slow to sit on the matmul path; resolve it once.
    static WORKERS: std::sync::OnceLock<usize> = std::sync::OnceLock::new();
    *WORKERS.get_or_init(|| std::thread::available_parallelism().map_or(1, |p| p.get()))
}

#[cfg(feature = "std")]
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // Threads only pay off on large products; each takes a disjoint row
    // block, so the result is identical to the serial path.
    const PARALLEL_THRESHOLD: usize = 1 << 22;
    if m < 2 || m * k * n < PARALLEL_THRESHOLD {
        matmul_rows(a, b, out, 0..m, k, n);
        return;
    }
    let workers = worker_count();
    if workers < 2 {
        matmul_rows(a, b, out, 0..m, k, n);
        return;
    }
    let workers = workers.min(m);
    let chunk_rows = m.div_ceil(workers);
    std::thread::scope(|scope| {
        for (idx, out_chunk) in out.chunks_mut(chunk_rows * n).enumerate() {
            let start = idx * chunk_rows;
            let rows = out_chunk.len() / n;
            scope.spawn(move || {
                // Re-base the chunk as rows [0, rows) of a shifted `a`.
                matmul_rows(&a[start * k..], b, out_chunk, 0..rows, k, n);
            });
        }
    });
}

#[cfg(not(feature = "std"))]
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    matmul_rows(a, b, out, 0..m, k, n);
}

pub(crate) fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

// ── Finite differences ───────────────────────────────────────────────

/// Central-difference gradient of a scalar function, the test oracle for
/// every analytic gradient in the crate.
pub fn finite_difference_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(CoreError::Contract(String::from("step h must be positive")));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let f_plus = f(&probe)?;
        probe.data[i] = orig - h;
        let f_minus = f(&probe)?;
        probe.data[i] = orig;
        grad[i] = (f_plus - f_minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn matmul_identity_case() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let out = g.matmul(i, v).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_computed() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = g.matmul(z, b).unwrap();
        assert!(g.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(matches!(g.matmul(a, b), Err(CoreError::Dimension(_))));
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let out = g.exp(x).unwrap();
        assert_eq!(g.scalar_value(out), 1.0);
    }

    #[test]
    fn log_exp_inverse_pair_on_grid() {
        let mut g = Graph::new();
        let xs: Vec<f64> = (-50..=50).map(|i| i as f64 / 10.0).collect();
        let x = g.constant(Tensor::vector(xs.clone()));
        let e = g.exp(x).unwrap();
        let back = g.log(e).unwrap();
        for (orig, round) in xs.iter().zip(g.value(back).data()) {
            assert!((orig - round).abs() < 1e-12, "{orig} vs {round}");
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-3.0, 3.0]));
        let out = g.relu(x).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 3.0]);
    }

    #[test]
    fn log_domain_violation() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(CoreError::Domain(_))));
    }

    #[test]
    fn div_by_zero_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(0.0));
        assert!(matches!(g.div(a, b), Err(CoreError::Domain(_))));
    }

    #[test]
    fn row_broadcast_add() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let r = g.constant(Tensor::vector(vec![10.0, 20.0, 30.0]));
        let out = g.add(m, r).unwrap();
        assert_eq!(g.value(out).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn scalar_broadcast_mul() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let s = g.constant(Tensor::scalar(3.0));
        let out = g.mul(m, s).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 6.0]);
    }

    #[test]
    fn mean_of_vector() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let out = g.mean(x, None).unwrap();
        assert_eq!(g.scalar_value(out), 2.0);
    }

    #[test]
    fn l2_norm_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let out = g.l2_norm(x, None).unwrap();
        assert_eq!(g.scalar_value(out), 5.0);
    }

    #[test]
    fn sum_of_empty_axis_slice_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![0, 3], vec![]).unwrap());
        let out = g.sum(x, Some(0)).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0, 0.0]);
        let empty = g.constant(Tensor::vector(vec![]));
        let total = g.sum(empty, None).unwrap();
        assert_eq!(g.scalar_value(total), 0.0);
    }

    #[test]
    fn invalid_axis_is_dimension_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0]));
        assert!(matches!(g.sum(x, Some(2)), Err(CoreError::Dimension(_))));
    }

    #[test]
    fn axis_sums_match_hand_computation() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let cols = g.sum(m, Some(0)).unwrap();
        let rows = g.sum(m, Some(1)).unwrap();
        assert_eq!(g.value(cols).data(), &[5.0, 7.0, 9.0]);
        assert_eq!(g.value(rows).data(), &[6.0, 15.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // loss = sum(w * w), w = [1, 2] -> grad = 2w = [2, 4]
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq, None).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_unused_leaf_gets_zeros() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let x = g.constant(Tensor::scalar(5.0));
        let loss = g.scale(x, 2.0).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad_or_zeros(w), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_linear_gives_constant() {
        // loss = sum(c * w) -> grad = c
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]).with_grad());
        let c = g.constant(Tensor::vector(vec![4.0, 5.0, 6.0]));
        let prod = g.mul(c, w).unwrap();
        let loss = g.sum(prod, None).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_sum_rule() {
        // z = x + y: both gradients equal the upstream gradient.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let y = g.leaf(Tensor::vector(vec![3.0, 4.0]).with_grad());
        let z = g.add(x, y).unwrap();
        let scaled = g.scale(z, 2.5).unwrap();
        let loss = g.sum(scaled, None).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.5, 2.5]);
        assert_eq!(g.grad(x).unwrap(), g.grad(y).unwrap());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let y = g.scale(w, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(CoreError::Contract(_))));
    }

    #[test]
    fn tape_consumed_after_backward() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(1.0).with_grad());
        let loss = g.scale(w, 2.0).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.scale(w, 1.0), Err(CoreError::Contract(_))));
        assert!(matches!(g.backward(loss), Err(CoreError::Contract(_))));
    }

    #[test]
    fn fd_quadratic() {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.data()[0] * t.data()[0]) };
        let x = Tensor::scalar(3.0);
        let grad = finite_difference_grad(f, &x, 1e-5).unwrap();
        assert!((grad.data()[0] - 6.0).abs() < 1e-8, "{}", grad.data()[0]);
    }

    #[test]
    fn fd_constant_function() {
        let f = |_: &Tensor| -> Result<f64> { Ok(7.0) };
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let grad = finite_difference_grad(f, &x, 1e-5).unwrap();
        assert_eq!(grad.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fd_exponential_at_zero() {
        let f = |t: &Tensor| -> Result<f64> { Ok(libm::exp(t.data()[0])) };
        let x = Tensor::scalar(0.0);
        let grad = finite_difference_grad(f, &x, 1e-5).unwrap();
        assert!((grad.data()[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn fd_rejects_nonpositive_step() {
        let f = |_: &Tensor| -> Result<f64> { Ok(0.0) };
        assert!(finite_difference_grad(f, &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn first_nonfinite_names_the_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1e308));
        let doubled = g.scale(x, 10.0).unwrap(); // overflows to inf
        let (op, id) = g.first_nonfinite().unwrap();
        assert_eq!(op, "scale");
        assert_eq!(id, doubled);
    }

    #[test]
    fn validate_finite_flags_nan() {
        let t = Tensor::vector(vec![1.0, f64::NAN]);
        assert!(matches!(t.validate_finite(), Err(CoreError::NonFinite { .. })));
        assert!(Tensor::vector(vec![1.0, 2.0]).validate_finite().is_ok());
    }

    // ── Random composite graphs vs finite differences ────────────────

    /// A replayable forward plan over two leaf matrices and one constant.
    #[derive(Clone, Debug)]
    enum PlanOp {
        AddConstMat,
        MulLeaf2,
        AddLeaf2,
        Softplus,
        ExpScaled,
        DivShiftedSoftplus,
        MatmulProj,
        Neg,
    }

    struct Plan {
        ops: Vec<PlanOp>,
        rows: usize,
        cols: usize,
        const_mat: Tensor,
        proj: Tensor,
    }

    fn run_plan(plan: &Plan, w1: &Tensor, w2: &Tensor) -> Result<(Graph, NodeId, NodeId, NodeId)> {
        let mut g = Graph::new();
        let l1 = g.param(w1);
        let l2 = g.param(w2);
        let cmat = g.constant(plan.const_mat.clone());
        let proj = g.constant(plan.proj.clone());
        let mut cur = l1;
        let mut projected = false;
        for op in &plan.ops {
            cur = match op {
                PlanOp::AddConstMat if !projected => g.add(cur, cmat)?,
                PlanOp::MulLeaf2 if !projected => g.mul(cur, l2)?,
                PlanOp::AddLeaf2 if !projected => g.add(cur, l2)?,
                PlanOp::Softplus => g.softplus(cur)?,
                PlanOp::ExpScaled => {
                    let s = g.scale(cur, 0.2)?;
                    g.exp(s)?
                }
                PlanOp::DivShiftedSoftplus if !projected => {
                    let sp = g.softplus(l2)?;
                    let denom = g.shift(sp, 1.0)?;
                    g.div(cur, denom)?
                }
                PlanOp::MatmulProj if !projected => {
                    projected = true;
                    g.matmul(cur, proj)?
                }
                PlanOp::Neg => g.neg(cur)?,
                _ => cur,
            };
        }
        let loss = g.mean(cur, None)?;
        Ok((g, loss, l1, l2))
    }

    #[test]
    fn composite_graphs_match_finite_differences() {
        let mut rng = crate::rng::Rng::from_seed(2024);
        for case in 0..20 {
            let rows = 1 + rng.next_range(4);
            let cols = 1 + rng.next_range(8);
            let proj_cols = 1 + rng.next_range(4);
            let depth = 1 + rng.next_range(6);
            let ops: Vec<PlanOp> = (0..depth)
                .map(|_| match rng.next_range(8) {
                    0 => PlanOp::AddConstMat,
                    1 => PlanOp::MulLeaf2,
                    2 => PlanOp::AddLeaf2,
                    3 => PlanOp::Softplus,
                    4 => PlanOp::ExpScaled,
                    5 => PlanOp::DivShiftedSoftplus,
                    6 => PlanOp::MatmulProj,
                    _ => PlanOp::Neg,
                })
                .collect();
            let plan = Plan {
                ops,
                rows,
                cols,
                const_mat: Tensor::matrix(rows, cols, rng.normal_vec(rows * cols)).unwrap(),
                proj: Tensor::matrix(cols, proj_cols, rng.normal_vec(cols * proj_cols)).unwrap(),
            };
            let w1 = Tensor::matrix(plan.rows, plan.cols, rng.normal_vec(rows * cols)).unwrap();
            let w2 = Tensor::matrix(plan.rows, plan.cols, rng.normal_vec(rows * cols)).unwrap();

            let (mut g, loss, l1, l2) = run_plan(&plan, &w1, &w2).unwrap();
            // Identical forward passes are bit-identical.
            let (g2, loss2, _, _) = run_plan(&plan, &w1, &w2).unwrap();
            assert_eq!(g.value(loss).data(), g2.value(loss2).data());

            g.backward(loss).unwrap();
            let analytic1 = g.grad_or_zeros(l1);
            let analytic2 = g.grad_or_zeros(l2);

            let fd1 = finite_difference_grad(
                |t| {
                    let (gg, l, _, _) = run_plan(&plan, t, &w2)?;
                    Ok(gg.scalar_value(l))
                },
                &w1,
                1e-5,
            )
            .unwrap();
            let fd2 = finite_difference_grad(
                |t| {
                    let (gg, l, _, _) = run_plan(&plan, &w1, t)?;
                    Ok(gg.scalar_value(l))
                },
                &w2,
                1e-5,
            )
            .unwrap();

            for (i, (&a, &n)) in analytic1.iter().zip(fd1.data()).enumerate() {
                assert!(rel_err(a, n) <= 1e-4, "case {case} w1[{i}]: {a} vs {n}");
            }
            for (i, (&a, &n)) in analytic2.iter().zip(fd2.data()).enumerate() {
                assert!(rel_err(a, n) <= 1e-4, "case {case} w2[{i}]: {a} vs {n}");
            }
        }
    }

    #[test]
    fn colvec_ops_match_finite_differences() {
        let mut rng = crate::rng::Rng::from_seed(7);
        let m = Tensor::matrix(3, 4, rng.normal_vec(12)).unwrap();
        let v = Tensor::vector(rng.normal_vec(3).iter().map(|x| x.abs() + 1.0).collect());

        let run = |mt: &Tensor, vt: &Tensor| -> Result<(Graph, NodeId, NodeId, NodeId)> {
            let mut g = Graph::new();
            let mid = g.param(mt);
            let vid = g.param(vt);
            let scaled = g.mul_colvec(mid, vid)?;
            let divided = g.div_colvec(scaled, vid)?;
            let mixed = g.mul_colvec(divided, vid)?;
            let loss = g.mean(mixed, None)?;
            Ok((g, loss, mid, vid))
        };

        let (mut g, loss, mid, vid) = run(&m, &v).unwrap();
        g.backward(loss).unwrap();
        let am = g.grad_or_zeros(mid);
        let av = g.grad_or_zeros(vid);

        let fdm = finite_difference_grad(
            |t| run(t, &v).map(|(gg, l, _, _)| gg.scalar_value(l)),
            &m,
            1e-5,
        )
        .unwrap();
        let fdv = finite_difference_grad(
            |t| run(&m, t).map(|(gg, l, _, _)| gg.scalar_value(l)),
            &v,
            1e-5,
        )
        .unwrap();
        for (&a, &n) in am.iter().zip(fdm.data()) {
            assert!(rel_err(a, n) <= 1e-4, "{a} vs {n}");
        }
        for (&a, &n) in av.iter().zip(fdv.data()) {
            assert!(rel_err(a, n) <= 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn l2_norm_rows_and_transpose_match_finite_differences() {
        let mut rng = crate::rng::Rng::from_seed(13);
        let m = Tensor::matrix(3, 4, rng.normal_vec(12)).unwrap();

        let run = |mt: &Tensor| -> Result<(Graph, NodeId, NodeId)> {
            let mut g = Graph::new();
            let mid = g.param(mt);
            let t = g.transpose(mid)?;
            let tt = g.transpose(t)?;
            let norms = g.l2_norm(tt, Some(1))?;
            let loss = g.mean(norms, None)?;
            Ok((g, loss, mid))
        };

        let (mut g, loss, mid) = run(&m).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad_or_zeros(mid);
        let fd = finite_difference_grad(
            |t| run(t).map(|(gg, l, _)| gg.scalar_value(l)),
            &m,
            1e-5,
        )
        .unwrap();
        for (&a, &n) in analytic.iter().zip(fd.data()) {
            assert!(rel_err(a, n) <= 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn concat_rows_backward_splits_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap().with_grad());
        let b = g.leaf(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap().with_grad());
        let c = g.concat_rows(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 2]);
        let w = g.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let prod = g.mul(c, w).unwrap();
        let loss = g.sum(prod, None).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 2.0]);
        assert_eq!(g.grad(b).unwrap(), &[3.0, 4.0, 5.0, 6.0]);
    }
}
