//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape of operation nodes in construction order, which is
//! always a valid topological order because an op can only reference nodes
//! that already exist. [`Var`] is a cheap handle (graph + node id) returned
//! by every op. Values are computed eagerly on the forward pass; backward
//! walks the tape once in reverse and accumulates vector-Jacobian products.
//!
//! The tape is single-threaded by construction (`Rc` handles); independent
//! graphs on independent threads never share state.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_raw, Tensor};

const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Scale(usize, f64),
    SoftmaxLog(usize),
    L2Normalize(usize),
    Sum(usize),
    Row(usize, usize),
    Pick(usize, usize),
    StackRows(Vec<usize>),
    Reshape(usize),
    OffDiagRowLse(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Shared handle to a tape of nodes.
#[derive(Clone)]
pub struct Graph {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    graph: Graph,
    id: usize,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    /// Insert a tensor as a leaf node. Its `requires_grad` flag decides
    /// whether backward reports a gradient for it.
    pub fn leaf(&self, value: Tensor) -> Var {
        let requires = value.requires_grad();
        self.push(Op::Leaf, value, requires)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value.with_grad(), true)
    }

    /// Leaf that is held constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            graph: self.clone(),
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn checked(&self, op_name: &'static str, op: Op, value: Tensor, requires: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        Ok(self.push(op, value, requires))
    }

    /// Stack row vectors (shape `[n]` or `[1, n]`) into an `m x n` matrix.
    pub fn stack_rows(&self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Contract("stack_rows needs at least one row".into()));
        }
        let mut width = None;
        let mut data = Vec::new();
        let mut ids = Vec::with_capacity(rows.len());
        let mut requires = false;
        for v in rows {
            if !self.same_graph(&v.graph) {
                return Err(Error::Contract("stack_rows across distinct graphs".into()));
            }
            let t = self.value_of(v.id);
            let n = match t.rank() {
                1 => t.shape()[0],
                2 if t.shape()[0] == 1 => t.shape()[1],
                _ => {
                    return Err(Error::ShapeMismatch(format!(
                        "stack_rows expects row vectors, got shape {:?}",
                        t.shape()
                    )))
                }
            };
            match width {
                None => width = Some(n),
                Some(w) if w != n => {
                    return Err(Error::ShapeMismatch(format!(
                        "stack_rows width mismatch: {w} vs {n}"
                    )))
                }
                _ => {}
            }
            data.extend_from_slice(t.data());
            requires |= self.requires(v.id);
            ids.push(v.id);
        }
        let n = width.unwrap();
        let value = Tensor::from_vec(&[rows.len(), n], data)?;
        self.checked("stack_rows", Op::StackRows(ids), value, requires)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: &Var) -> Result<GradMap> {
        if !self.same_graph(&root.graph) {
            return Err(Error::Contract("backward root from a different graph".into()));
        }
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::NonScalarRoot { shape: root_shape });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, id, &grad, &mut grads);
            grads[id] = Some(grad);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(GradMap { shapes, grads })
    }
}

/// Accumulate `src` into `dst[idx]`, allocating zeros on first touch.
fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn propagate(nodes: &[Node], id: usize, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (a, b) = (*a, *b);
            let ta = &nodes[a].value;
            let tb = &nodes[b].value;
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = tb.shape()[1];
            if nodes[a].requires_grad {
                // dA = G . B^T
                let bt = transpose_raw(tb.data(), k, n);
                let da = matmul_raw(grad, &bt, m, n, k);
                accumulate(grads, a, m * k, |dst| {
                    for (d, s) in dst.iter_mut().zip(&da) {
                        *d += s;
                    }
                });
            }
            if nodes[b].requires_grad {
                // dB = A^T . G
                let at = transpose_raw(ta.data(), m, k);
                let db = matmul_raw(&at, grad, k, m, n);
                accumulate(grads, b, k * n, |dst| {
                    for (d, s) in dst.iter_mut().zip(&db) {
                        *d += s;
                    }
                });
            }
        }
        Op::Transpose(a) => {
            let a = *a;
            if nodes[a].requires_grad {
                let out_shape = node.value.shape();
                let (r, c) = (out_shape[0], out_shape[1]);
                let gt = transpose_raw(grad, r, c);
                accumulate(grads, a, gt.len(), |dst| {
                    for (d, s) in dst.iter_mut().zip(&gt) {
                        *d += s;
                    }
                });
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let (a, b) = (*a, *b);
            let sign = if matches!(node.op, Op::Sub(_, _)) { -1.0 } else { 1.0 };
            let na = nodes[a].value.numel();
            let nb = nodes[b].value.numel();
            if nodes[a].requires_grad {
                accumulate(grads, a, na, |dst| {
                    if na == grad.len() {
                        for (d, g) in dst.iter_mut().zip(grad) {
                            *d += g;
                        }
                    } else {
                        // scalar lhs broadcast over rhs
                        dst[0] += grad.iter().sum::<f64>();
                    }
                });
            }
            if nodes[b].requires_grad {
                accumulate(grads, b, nb, |dst| {
                    if nb == grad.len() {
                        for (d, g) in dst.iter_mut().zip(grad) {
                            *d += sign * g;
                        }
                    } else {
                        dst[0] += sign * grad.iter().sum::<f64>();
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let ta = nodes[a].value.data().to_vec();
            let tb = nodes[b].value.data().to_vec();
            if nodes[a].requires_grad {
                accumulate(grads, a, ta.len(), |dst| match (ta.len(), tb.len()) {
                    (1, _) => dst[0] += grad.iter().zip(&tb).map(|(g, y)| g * y).sum::<f64>(),
                    (_, 1) => {
                        for (d, g) in dst.iter_mut().zip(grad) {
                            *d += g * tb[0];
                        }
                    }
                    _ => {
                        for ((d, g), y) in dst.iter_mut().zip(grad).zip(&tb) {
                            *d += g * y;
                        }
                    }
                });
            }
            if nodes[b].requires_grad {
                accumulate(grads, b, tb.len(), |dst| match (tb.len(), ta.len()) {
                    (1, _) => dst[0] += grad.iter().zip(&ta).map(|(g, x)| g * x).sum::<f64>(),
                    (_, 1) => {
                        for (d, g) in dst.iter_mut().zip(grad) {
                            *d += g * ta[0];
                        }
                    }
                    _ => {
                        for ((d, g), x) in dst.iter_mut().zip(grad).zip(&ta) {
                            *d += g * x;
                        }
                    }
                });
            }
        }
        Op::Tanh(a) => {
            let a = *a;
            if nodes[a].requires_grad {
                let y = node.value.data().to_vec();
                accumulate(grads, a, y.len(), |dst| {
                    for ((d, g), y) in dst.iter_mut().zip(grad).zip(&y) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
        }
        Op::Exp(a) => {
            let a = *a;
            if nodes[a].requires_grad {
                let y = node.value.data().to_vec();
                accumulate(grads, a, y.len(), |dst| {
                    for ((d, g), y) in dst.iter_mut().zip(grad).zip(&y) {
                        *d += g * y;
                    }
                });
            }
        }
        Op::Log(a) => {
            let a = *a;
            if nodes[a].requires_grad {
                let x = nodes[a].value.data().to_vec();
                accumulate(grads, a, x.len(), |dst| {
                    for ((d, g), x) in dst.iter_mut().zip(grad).zip(&x) {
                        *d += g / x;
                    }
                });
            }
        }
        Op::Scale(a, c) => {
            let (a, c) = (*a, *c);
            if nodes[a].requires_grad {
                accumulate(grads, a, grad.len(), |dst| {
                    for (d, g) in dst.iter_mut().zip(grad) {
                        *d += c * g;
                    }
                });
            }
        }
        Op::SoftmaxLog(a) => {
            let a = *a;
            if nodes[a].requires_grad {
                // dx_j = g_j - softmax_j * sum_k g_k, per row
                let y = node.value.clone();
                let cols = y.cols();
                let rows = y.rows();
                accumulate(grads, a, y.numel(), |dst| {
                    for r in 0..rows {
                        let gs = &grad[r * cols..(r + 1) * cols];
                        let ys = &y.data()[r * cols..(r + 1) * cols];
                        let gsum: f64 = gs.iter().sum();
                        let drow = &mut dst[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            drow[j] += gs[j] - ys[j].exp() * gsum;
                        }
                    }
                });
            }
        }
        Op::L2Normalize(a) => {
            let a = *a;
            if nodes[a].requires_grad {
                let x = nodes[a].value.clone();
                let y = node.value.clone();
                let norm = x.l2_norm();
                accumulate(grads, a, x.numel(), |dst| {
                    let dot: f64 = grad.iter().zip(y.data()).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dst.iter_mut().zip(grad).zip(y.data()) {
                        *d += (g - y * dot) / norm;
                    }
                });
            }
        }
        Op::Sum(a) => {
            let a = *a;
            if nodes[a].requires_grad {
                let n = nodes[a].value.numel();
                let g = grad[0];
                accumulate(grads, a, n, |dst| {
                    for d in dst.iter_mut() {
                        *d += g;
                    }
                });
            }
        }
        Op::Row(a, i) => {
            let (a, i) = (*a, *i);
            if nodes[a].requires_grad {
                let cols = nodes[a].value.shape()[1];
                let n = nodes[a].value.numel();
                accumulate(grads, a, n, |dst| {
                    for (d, g) in dst[i * cols..(i + 1) * cols].iter_mut().zip(grad) {
                        *d += g;
                    }
                });
            }
        }
        Op::Pick(a, flat) => {
            let (a, flat) = (*a, *flat);
            if nodes[a].requires_grad {
                let n = nodes[a].value.numel();
                let g = grad[0];
                accumulate(grads, a, n, |dst| dst[flat] += g);
            }
        }
        Op::StackRows(ids) => {
            let cols = node.value.shape()[1];
            for (r, &src) in ids.iter().enumerate() {
                if nodes[src].requires_grad {
                    let n = nodes[src].value.numel();
                    accumulate(grads, src, n, |dst| {
                        for (d, g) in dst.iter_mut().zip(&grad[r * cols..(r + 1) * cols]) {
                            *d += g;
                        }
                    });
                }
            }
        }
        Op::Reshape(a) => {
            let a = *a;
            if nodes[a].requires_grad {
                accumulate(grads, a, grad.len(), |dst| {
                    for (d, g) in dst.iter_mut().zip(grad) {
                        *d += g;
                    }
                });
            }
        }
        Op::OffDiagRowLse(a) => {
            let a = *a;
            if nodes[a].requires_grad {
                let s = nodes[a].value.clone();
                let m = s.shape()[0];
                let lse = node.value.data().to_vec();
                accumulate(grads, a, m * m, |dst| {
                    for i in 0..m {
                        let gi = grad[i];
                        if gi == 0.0 {
                            continue;
                        }
                        for k in 0..m {
                            if k == i {
                                continue;
                            }
                            dst[i * m + k] += gi * (s.data()[i * m + k] - lse[i]).exp();
                        }
                    }
                });
            }
        }
    }
}

/// Gradients keyed by node id. Nodes that did not participate in the root
/// computation report an exact-zero gradient of their value's shape.
pub struct GradMap {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl GradMap {
    pub fn get(&self, var: &Var) -> Tensor {
        let shape = &self.shapes[var.id];
        match &self.grads[var.id] {
            Some(g) => Tensor::from_vec(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn binary_shape_check(op: &str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch(format!(
            "{op}: shapes {:?} and {:?} (only scalar broadcasting is supported)",
            a.shape(),
            b.shape()
        )))
    }
}

/// Log-probabilities of one row of logits via max-shifted log-sum-exp.
pub(crate) fn softmax_log_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn requires(&self) -> bool {
        self.graph.requires(self.id)
    }

    fn check_same(&self, other: &Var, op: &str) -> Result<()> {
        if !self.graph.same_graph(&other.graph) {
            return Err(Error::Contract(format!("{op} across distinct graphs")));
        }
        Ok(())
    }

    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        self.check_same(rhs, "matmul")?;
        let a = self.value();
        let b = rhs.value();
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        let value = Tensor::from_vec(&[m, n], data)?;
        self.graph.checked(
            "matmul",
            Op::Matmul(self.id, rhs.id),
            value,
            self.requires() || rhs.requires(),
        )
    }

    pub fn transpose(&self) -> Result<Var> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose on rank-{} tensor",
                a.rank()
            )));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let value = Tensor::from_vec(&[c, r], transpose_raw(a.data(), r, c))?;
        self.graph
            .checked("transpose", Op::Transpose(self.id), value, self.requires())
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        self.check_same(rhs, "add")?;
        let a = self.value();
        let b = rhs.value();
        let shape = binary_shape_check("add", &a, &b)?;
        let data = broadcast_zip(&a, &b, |x, y| x + y);
        let value = Tensor::from_vec(&shape, data)?;
        self.graph.checked(
            "add",
            Op::Add(self.id, rhs.id),
            value,
            self.requires() || rhs.requires(),
        )
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        self.check_same(rhs, "sub")?;
        let a = self.value();
        let b = rhs.value();
        let shape = binary_shape_check("sub", &a, &b)?;
        let data = broadcast_zip(&a, &b, |x, y| x - y);
        let value = Tensor::from_vec(&shape, data)?;
        self.graph.checked(
            "sub",
            Op::Sub(self.id, rhs.id),
            value,
            self.requires() || rhs.requires(),
        )
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        self.check_same(rhs, "mul")?;
        let a = self.value();
        let b = rhs.value();
        let shape = binary_shape_check("mul", &a, &b)?;
        let data = broadcast_zip(&a, &b, |x, y| x * y);
        let value = Tensor::from_vec(&shape, data)?;
        self.graph.checked(
            "mul",
            Op::Mul(self.id, rhs.id),
            value,
            self.requires() || rhs.requires(),
        )
    }

    pub fn tanh(&self) -> Result<Var> {
        let a = self.value();
        let data = a.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::from_vec(a.shape(), data)?;
        self.graph
            .checked("tanh", Op::Tanh(self.id), value, self.requires())
    }

    pub fn exp(&self) -> Result<Var> {
        let a = self.value();
        let data = a.data().iter().map(|v| v.exp()).collect();
        let value = Tensor::from_vec(a.shape(), data)?;
        self.graph
            .checked("exp", Op::Exp(self.id), value, self.requires())
    }

    pub fn log(&self) -> Result<Var> {
        let a = self.value();
        if let Some(bad) = a.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let data = a.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::from_vec(a.shape(), data)?;
        self.graph
            .checked("log", Op::Log(self.id), value, self.requires())
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        let a = self.value();
        let data = a.data().iter().map(|v| v * c).collect();
        let value = Tensor::from_vec(a.shape(), data)?;
        self.graph
            .checked("scale", Op::Scale(self.id, c), value, self.requires())
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    /// Log-probabilities via max-shifted log-sum-exp. Rank-1 input is one
    /// distribution; rank-2 input is normalized row-wise.
    pub fn softmax_log(&self) -> Result<Var> {
        let a = self.value();
        if a.rank() > 2 {
            return Err(Error::ShapeMismatch(format!(
                "softmax_log on rank-{} tensor",
                a.rank()
            )));
        }
        let cols = a.cols();
        let rows = a.rows();
        if cols == 0 {
            return Err(Error::ShapeMismatch("softmax_log on empty logits".into()));
        }
        let mut data = vec![0.0; a.numel()];
        for r in 0..rows {
            softmax_log_row(
                &a.data()[r * cols..(r + 1) * cols],
                &mut data[r * cols..(r + 1) * cols],
            );
        }
        let value = Tensor::from_vec(a.shape(), data)?;
        self.graph
            .checked("softmax_log", Op::SoftmaxLog(self.id), value, self.requires())
    }

    /// Unit-norm copy of a vector (rank-1 or a single row).
    pub fn l2_normalize(&self) -> Result<Var> {
        let a = self.value();
        if !(a.rank() == 1 || (a.rank() == 2 && a.shape()[0] == 1)) {
            return Err(Error::ShapeMismatch(format!(
                "l2_normalize expects a vector, got shape {:?}",
                a.shape()
            )));
        }
        let norm = a.l2_norm();
        if norm <= NORM_EPSILON {
            return Err(Error::DegenerateVector { norm });
        }
        let data = a.data().iter().map(|v| v / norm).collect();
        let value = Tensor::from_vec(a.shape(), data)?;
        self.graph
            .checked("l2_normalize", Op::L2Normalize(self.id), value, self.requires())
    }

    /// Full reduction to a scalar.
    pub fn sum(&self) -> Result<Var> {
        let a = self.value();
        let value = Tensor::from_vec(&[], vec![a.data().iter().sum()])?;
        self.graph
            .checked("sum", Op::Sum(self.id), value, self.requires())
    }

    /// Row `i` of a rank-2 tensor, as a `1 x n` matrix.
    pub fn row(&self, i: usize) -> Result<Var> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "row on rank-{} tensor",
                a.rank()
            )));
        }
        if i >= a.shape()[0] {
            return Err(Error::Contract(format!(
                "row index {i} out of bounds for {} rows",
                a.shape()[0]
            )));
        }
        let cols = a.shape()[1];
        let value = Tensor::from_vec(&[1, cols], a.data()[i * cols..(i + 1) * cols].to_vec())?;
        self.graph
            .checked("row", Op::Row(self.id, i), value, self.requires())
    }

    /// Single element by flat index, as a scalar node.
    pub fn pick(&self, flat: usize) -> Result<Var> {
        let a = self.value();
        if flat >= a.numel() {
            return Err(Error::Contract(format!(
                "pick index {flat} out of bounds for {} elements",
                a.numel()
            )));
        }
        let value = Tensor::from_vec(&[], vec![a.data()[flat]])?;
        self.graph
            .checked("pick", Op::Pick(self.id, flat), value, self.requires())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let a = self.value();
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                a.shape(),
                shape
            )));
        }
        let value = Tensor::from_vec(shape, a.data().to_vec())?;
        self.graph
            .checked("reshape", Op::Reshape(self.id), value, self.requires())
    }

    /// Per-row log-sum-exp of a square matrix with the diagonal excluded:
    /// `out_i = log sum_{k != i} exp(S_ik)`, max-shifted per row.
    pub fn off_diag_row_lse(&self) -> Result<Var> {
        let s = self.value();
        if s.rank() != 2 || s.shape()[0] != s.shape()[1] {
            return Err(Error::ShapeMismatch(format!(
                "off_diag_row_lse expects a square matrix, got {:?}",
                s.shape()
            )));
        }
        let m = s.shape()[0];
        if m < 2 {
            return Err(Error::InsufficientBatch { m });
        }
        let mut data = vec![0.0; m];
        for i in 0..m {
            let row = &s.data()[i * m..(i + 1) * m];
            let mut max = f64::NEG_INFINITY;
            for (k, v) in row.iter().enumerate() {
                if k != i && *v > max {
                    max = *v;
                }
            }
            let mut sum = 0.0;
            for (k, v) in row.iter().enumerate() {
                if k != i {
                    sum += (v - max).exp();
                }
            }
            data[i] = max + sum.ln();
        }
        let value = Tensor::from_vec(&[m], data)?;
        self.graph.checked(
            "off_diag_row_lse",
            Op::OffDiagRowLse(self.id),
            value,
            self.requires(),
        )
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
    } else if a.is_scalar() {
        b.data().iter().map(|y| f(a.data()[0], *y)).collect()
    } else {
        a.data().iter().map(|x| f(*x, b.data()[0])).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(g: &Graph, v: f64) -> Var {
        g.param(Tensor::scalar(v))
    }

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let i2 = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = i2.matmul(&a).unwrap();
        assert_eq!(out.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_basis() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let b = g.constant(Tensor::from_vec(&[2, 1], vec![0.0, 1.0]).unwrap());
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.value().data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        assert_eq!(x.tanh().unwrap().item(), 0.0);
    }

    #[test]
    fn exp_log_inverse_pair() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[3], vec![0.5, 1.0, 7.25]).unwrap());
        let out = x.log().unwrap().exp().unwrap();
        for (a, b) in out.value().data().iter().zip(x.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_rejects_non_positive() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2], vec![1.0, -0.5]).unwrap());
        assert!(matches!(x.log(), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_log_uniform() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap());
        let out = x.softmax_log().unwrap();
        for v in out.value().data() {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_log_max_shift_is_stable() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap());
        let out = x.softmax_log().unwrap();
        assert!(out.value().all_finite());
        assert!(out.value().data()[0].abs() < 1e-9);
    }

    #[test]
    fn softmax_log_exp_sums_to_one() {
        let g = Graph::new();
        let x = g.constant(
            Tensor::from_vec(&[5], vec![0.3, -2.0, 5.5, 0.0, 1.25]).unwrap(),
        );
        let out = x.softmax_log().unwrap();
        let total: f64 = out.value().data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_345_triangle() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let out = x.l2_normalize().unwrap();
        assert_eq!(out.value().data(), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_idempotent_on_unit_vector() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2], vec![0.6, 0.8]).unwrap());
        let out = x.l2_normalize().unwrap();
        for (a, b) in out.value().data().iter().zip(&[0.6, 0.8]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_scale_invariant() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let scaled = x.scale(7.3).unwrap();
        let a = x.l2_normalize().unwrap();
        let b = scaled.l2_normalize().unwrap();
        for (x, y) in a.value().data().iter().zip(b.value().data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_rejects_near_zero() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[2], vec![0.0, 1e-13]).unwrap());
        assert!(matches!(
            x.l2_normalize(),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn backward_square() {
        let g = Graph::new();
        let x = scalar_param(&g, 3.0);
        let y = x.mul(&x).unwrap();
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.get(&x).item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let g = Graph::new();
        let x = g.param(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let y = x.add(&x).unwrap();
        assert!(matches!(g.backward(&y), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn unused_leaf_has_exact_zero_grad() {
        let g = Graph::new();
        let x = scalar_param(&g, 2.0);
        let unused = g.param(Tensor::from_vec(&[2, 2], vec![1.0; 4]).unwrap());
        let y = x.mul(&x).unwrap();
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.get(&unused).data(), &[0.0; 4]);
        assert_eq!(grads.get(&x).item(), 4.0);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let build = || {
            let g = Graph::new();
            let w = g.param(
                Tensor::from_vec(&[2, 3], vec![0.1, -0.4, 0.9, 0.3, 0.2, -0.7]).unwrap(),
            );
            let x = g.constant(Tensor::from_vec(&[3, 1], vec![0.5, -1.5, 2.5]).unwrap());
            let y = w.matmul(&x).unwrap().tanh().unwrap().sum().unwrap();
            let grads = g.backward(&y).unwrap();
            grads.get(&w).data().to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn off_diag_lse_uniform_rows() {
        let g = Graph::new();
        let s = g.constant(Tensor::from_vec(&[3, 3], vec![5.0; 9]).unwrap());
        let out = s.off_diag_row_lse().unwrap();
        for v in out.value().data() {
            assert!((v - (5.0 + 2f64.ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn off_diag_lse_rejects_single_candidate() {
        let g = Graph::new();
        let s = g.constant(Tensor::from_vec(&[1, 1], vec![0.0]).unwrap());
        assert!(matches!(
            s.off_diag_row_lse(),
            Err(Error::InsufficientBatch { m: 1 })
        ));
    }

    #[test]
    fn scalar_broadcast_add_and_mul() {
        let g = Graph::new();
        let x = g.param(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let c = scalar_param(&g, 10.0);
        let y = x.add(&c).unwrap();
        assert_eq!(y.value().data(), &[11.0, 12.0, 13.0]);
        let z = y.mul(&c).unwrap().sum().unwrap();
        let grads = g.backward(&z).unwrap();
        // d/dc [ sum((x + c) * c) ] = sum(x) + 2*3*c
        assert!((grads.get(&c).item() - (6.0 + 60.0)).abs() < 1e-12);
        assert_eq!(grads.get(&x).data(), &[10.0, 10.0, 10.0]);
    }
}
