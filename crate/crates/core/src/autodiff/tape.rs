//! Tape-based reverse-mode differentiation over a fixed set of matrix ops.
//!
//! Values are computed eagerly as nodes are appended, so parents always
//! precede children and the node list is already in topological order.
//! `backward` walks it once in reverse.

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Softmax {
        input: NodeId,
        tau: f64,
    },
    Gelu(NodeId),
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows {
        input: NodeId,
        start: usize,
    },
    SliceCols {
        input: NodeId,
        start: usize,
    },
    Mean(NodeId),
    DivScalar(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    WeightNormCols {
        w: NodeId,
        gain: NodeId,
        norms: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scalar_mul",
            Op::Softmax { .. } => "rowwise_softmax",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layernorm",
            Op::Embedding { .. } => "embedding_lookup",
            Op::CrossEntropy { .. } => "cross_entropy_mean",
            Op::Transpose(_) => "transpose",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Mean(_) => "reduce_mean",
            Op::DivScalar(..) => "divide_by_scalar_node",
            Op::MulScalar(..) => "multiply_by_scalar_node",
            Op::WeightNormCols { .. } => "weight_norm_cols",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::DivScalar(a, b)
            | Op::MulScalar(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Transpose(a)
            | Op::Mean(a)
            | Op::Softmax { input: a, .. }
            | Op::SliceRows { input: a, .. }
            | Op::SliceCols { input: a, .. }
            | Op::Embedding { table: a, .. }
            | Op::CrossEntropy { logits: a, .. } => vec![*a],
            Op::LayerNorm {
                input, gain, bias, ..
            } => vec![*input, *gain, *bias],
            Op::ConcatRows(ids) | Op::ConcatCols(ids) => ids.clone(),
            Op::WeightNormCols { w, gain, .. } => vec![*w, *gain],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    op: Op,
    value: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn grad(&self) -> Option<&Matrix> {
        self.grad.as_ref()
    }

    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }

    pub fn parents(&self) -> Vec<NodeId> {
        self.op.parents()
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf)
    }
}

#[derive(Debug, Default, Clone)]
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that is never differentiated.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient of `id`, or zeros of the right shape if nothing reached it.
    pub fn grad_or_zeros(&self, id: NodeId) -> Matrix {
        let n = &self.nodes[id.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Matrix::zeros(n.value.rows(), n.value.cols()))
    }

    /// Values are computed as nodes are recorded; this validates the id and
    /// returns the cached value.
    pub fn forward(&self, root: NodeId) -> Result<&Matrix> {
        self.nodes
            .get(root.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Contract(format!("node {} is not on the tape", root.0)))
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn derived(&mut self, op: Op, value: Matrix) -> NodeId {
        let rg = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(op, value, rg)
    }

    fn check(&self, id: NodeId, op: &str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("{op}: unknown node {}", id.0)));
        }
        Ok(())
    }

    fn shape_err(&self, op: &str, detail: String) -> Error {
        Error::shape(format!("{op} (node {})", self.nodes.len()), detail)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(self.shape_err("matmul", format!("{:?} x {:?}", va.shape(), vb.shape())));
        }
        let v = va.matmul(vb)?;
        Ok(self.derived(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(self.shape_err("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let v = va.add(vb)?;
        Ok(self.derived(Op::Add(a, b), v))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check(a, "add_row")?;
        self.check(row, "add_row")?;
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(self.shape_err(
                "add_row",
                format!("{:?} + row {:?}", va.shape(), vr.shape()),
            ));
        }
        let mut v = va.clone();
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        Ok(self.derived(Op::AddRow(a, row), v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.check(a, "scalar_mul")?;
        let v = self.value(a).scale(s);
        Ok(self.derived(Op::Scale(a, s), v))
    }

    /// Row-wise `softmax(x / tau)`. `tau` is a control knob, not differentiated.
    pub fn softmax_rows(&mut self, a: NodeId, tau: f64) -> Result<NodeId> {
        self.softmax_impl(a, tau, false)
    }

    /// Row-wise softmax with entries strictly above the diagonal masked out.
    pub fn causal_softmax_rows(&mut self, a: NodeId, tau: f64) -> Result<NodeId> {
        self.softmax_impl(a, tau, true)
    }

    fn softmax_impl(&mut self, a: NodeId, tau: f64, causal: bool) -> Result<NodeId> {
        self.check(a, "rowwise_softmax")?;
        let v = softmax_rows(self.value(a), tau, causal)?;
        Ok(self.derived(Op::Softmax { input: a, tau }, v))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "gelu")?;
        let v = self.value(a).map(gelu);
        Ok(self.derived(Op::Gelu(a), v))
    }

    /// Per-row normalization over the last axis with learned `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        for id in [x, gain, bias] {
            self.check(id, "layernorm")?;
        }
        let vx = self.value(x);
        let (n, d) = vx.shape();
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.shape() != (1, d) || vb.shape() != (1, d) {
            return Err(self.shape_err(
                "layernorm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    vx.shape(),
                    vg.shape(),
                    vb.shape()
                ),
            ));
        }
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(r);
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[(i, j)] = h;
                out[(i, j)] = h * vg.data()[j] + vb.data()[j];
            }
        }
        Ok(self.derived(
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check(table, "embedding_lookup")?;
        let vt = self.value(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= vt.rows()) {
            return Err(self.shape_err(
                "embedding_lookup",
                format!("index {bad} out of range for {} rows", vt.rows()),
            ));
        }
        let d = vt.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(vt.row(i));
        }
        let v = Matrix::from_vec(indices.len(), d, data)?;
        Ok(self.derived(
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            v,
        ))
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`; a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.check(logits, "cross_entropy_mean")?;
        let vl = self.value(logits);
        if targets.len() != vl.rows() || vl.rows() == 0 {
            return Err(self.shape_err(
                "cross_entropy_mean",
                format!("{} targets for {:?} logits", targets.len(), vl.shape()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vl.cols()) {
            return Err(self.shape_err(
                "cross_entropy_mean",
                format!("target {bad} out of range for {} classes", vl.cols()),
            ));
        }
        let probs = softmax_rows(vl, 1.0, false)?;
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            total -= log_softmax_at(vl.row(i), t);
        }
        let loss = total / targets.len() as f64;
        Ok(self.derived(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Matrix::scalar(loss),
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "transpose")?;
        let v = self.value(a).transpose();
        Ok(self.derived(Op::Transpose(a), v))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_rows", "no inputs".into()));
        }
        for &p in parts {
            self.check(p, "concat_rows")?;
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(
                    self.shape_err("concat_rows", format!("{} vs {} columns", v.cols(), cols))
                );
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        Ok(self.derived(Op::ConcatRows(parts.to_vec()), v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_cols", "no inputs".into()));
        }
        for &p in parts {
            self.check(p, "concat_cols")?;
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(self.shape_err("concat_cols", format!("{} vs {} rows", v.rows(), rows)));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        Ok(self.derived(Op::ConcatCols(parts.to_vec()), v))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(a, "slice_rows")?;
        let v = self
            .value(a)
            .slice_rows(start, len)
            .map_err(|e| self.shape_err("slice_rows", e.to_string()))?;
        Ok(self.derived(Op::SliceRows { input: a, start }, v))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(a, "slice_cols")?;
        let v = self
            .value(a)
            .slice_cols(start, len)
            .map_err(|e| self.shape_err("slice_cols", e.to_string()))?;
        Ok(self.derived(Op::SliceCols { input: a, start }, v))
    }

    /// Mean of all entries; a `1 × 1` node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a, "reduce_mean")?;
        let va = self.value(a);
        if va.is_empty() {
            return Err(self.shape_err("reduce_mean", "empty input".into()));
        }
        let m = va.data().iter().sum::<f64>() / va.len() as f64;
        Ok(self.derived(Op::Mean(a), Matrix::scalar(m)))
    }

    /// `a / s` with `s` a `1 × 1` node; both receive gradients.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.check(a, "divide_by_scalar_node")?;
        self.check(s, "divide_by_scalar_node")?;
        let sv = self.scalar_of(s, "divide_by_scalar_node")?;
        if sv == 0.0 {
            return Err(Error::Numerical(format!(
                "divide_by_scalar_node (node {}): division by zero",
                self.nodes.len()
            )));
        }
        let v = self.value(a).scale(1.0 / sv);
        Ok(self.derived(Op::DivScalar(a, s), v))
    }

    /// `a * s` with `s` a `1 × 1` node.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        self.check(a, "multiply_by_scalar_node")?;
        self.check(s, "multiply_by_scalar_node")?;
        let sv = self.scalar_of(s, "multiply_by_scalar_node")?;
        let v = self.value(a).scale(sv);
        Ok(self.derived(Op::MulScalar(a, s), v))
    }

    /// Column `j` of the result is `gain_j · w_j / ‖w_j‖`.
    pub fn weight_norm_cols(&mut self, w: NodeId, gain: NodeId) -> Result<NodeId> {
        self.check(w, "weight_norm_cols")?;
        self.check(gain, "weight_norm_cols")?;
        let (vw, vg) = (self.value(w), self.value(gain));
        if vg.shape() != (1, vw.cols()) {
            return Err(self.shape_err(
                "weight_norm_cols",
                format!("weight {:?}, gain {:?}", vw.shape(), vg.shape()),
            ));
        }
        let norms: Vec<f64> = (0..vw.cols())
            .map(|j| crate::linalg::norm(&vw.col(j)))
            .collect();
        if let Some(j) = norms.iter().position(|&n| n < 1e-30) {
            return Err(Error::Numerical(format!(
                "weight_norm_cols: column {j} has zero norm"
            )));
        }
        let mut v = vw.clone();
        for i in 0..v.rows() {
            for j in 0..v.cols() {
                v[(i, j)] *= vg.data()[j] / norms[j];
            }
        }
        Ok(self.derived(Op::WeightNormCols { w, gain, norms }, v))
    }

    fn scalar_of(&self, s: NodeId, op: &str) -> Result<f64> {
        self.value(s).as_scalar().ok_or_else(|| {
            self.shape_err(
                op,
                format!("scalar operand has shape {:?}", self.value(s).shape()),
            )
        })
    }

    /// Clears all gradients.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Seeds `∂root/∂root = 1` and propagates to every node that requires a gradient.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.backward_with_seed(root, 1.0)
    }

    pub fn backward_with_seed(&mut self, root: NodeId, seed: f64) -> Result<()> {
        self.check(root, "backward")?;
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, node {} is {:?}",
                root.0,
                self.value(root).shape()
            )));
        }
        self.zero_grads();
        self.nodes[root.0].grad = Some(Matrix::scalar(seed));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.vjp(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (parent, contrib) in contributions {
                let slot = &mut self.nodes[parent.0];
                if !slot.requires_grad {
                    continue;
                }
                match &mut slot.grad {
                    Some(acc) => acc.add_assign(&contrib),
                    None => slot.grad = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // Vector-Jacobian products of node `i` given its upstream gradient `g`.
    fn vjp(&self, i: usize, g: &Matrix) -> Result<Vec<(NodeId, Matrix)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.matmul_nt(self.value(*b))?));
                }
                if self.wants(*b) {
                    out.push((*b, self.value(*a).matmul_tn(g)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddRow(a, r) => {
                out.push((*a, g.clone()));
                if self.wants(*r) {
                    let mut acc = Matrix::zeros(1, g.cols());
                    for k in 0..g.rows() {
                        for (x, &y) in acc.data_mut().iter_mut().zip(g.row(k)) {
                            *x += y;
                        }
                    }
                    out.push((*r, acc));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::Softmax { input, tau } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let s = dot(yr, gr);
                    for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                        *d = yr[c] * (gr[c] - s) / tau;
                    }
                }
                out.push((*input, dx));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let dx = x.map(gelu_grad).hadamard(g)?;
                out.push((*a, dx));
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, d) = xhat.shape();
                let vg = self.value(*gain);
                if self.wants(*gain) {
                    let mut dg = Matrix::zeros(1, d);
                    for k in 0..n {
                        for j in 0..d {
                            dg.data_mut()[j] += g[(k, j)] * xhat[(k, j)];
                        }
                    }
                    out.push((*gain, dg));
                }
                if self.wants(*bias) {
                    let mut db = Matrix::zeros(1, d);
                    for k in 0..n {
                        for (x, &y) in db.data_mut().iter_mut().zip(g.row(k)) {
                            *x += y;
                        }
                    }
                    out.push((*bias, db));
                }
                if self.wants(*input) {
                    let mut dx = Matrix::zeros(n, d);
                    let df = d as f64;
                    for k in 0..n {
                        let dxhat: Vec<f64> = (0..d).map(|j| g[(k, j)] * vg.data()[j]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xhat.row(k)).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[(k, j)] =
                                inv_std[k] / df * (df * dxhat[j] - sum_d - xhat[(k, j)] * sum_dx);
                        }
                    }
                    out.push((*input, dx));
                }
            }
            Op::Embedding { table, indices } => {
                let vt = self.value(*table);
                let mut dt = Matrix::zeros(vt.rows(), vt.cols());
                for (k, &idx) in indices.iter().enumerate() {
                    for (x, &y) in dt.row_mut(idx).iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
                out.push((*table, dt));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let up = g.data()[0] / targets.len() as f64;
                let mut dl = probs.clone();
                for (k, &t) in targets.iter().enumerate() {
                    dl[(k, t)] -= 1.0;
                }
                out.push((*logits, dl.scale(up)));
            }
            Op::Transpose(a) => out.push((*a, g.transpose())),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.wants(p) {
                        out.push((p, g.slice_rows(start, r)?));
                    }
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.wants(p) {
                        out.push((p, g.slice_cols(start, c)?));
                    }
                    start += c;
                }
            }
            Op::SliceRows { input, start } => {
                let vi = self.value(*input);
                let mut d = Matrix::zeros(vi.rows(), vi.cols());
                for k in 0..g.rows() {
                    d.row_mut(start + k).copy_from_slice(g.row(k));
                }
                out.push((*input, d));
            }
            Op::SliceCols { input, start } => {
                let vi = self.value(*input);
                let mut d = Matrix::zeros(vi.rows(), vi.cols());
                for k in 0..g.rows() {
                    d.row_mut(k)[*start..start + g.cols()].copy_from_slice(g.row(k));
                }
                out.push((*input, d));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let fill = g.data()[0] / va.len() as f64;
                out.push((*a, Matrix::filled(va.rows(), va.cols(), fill)));
            }
            Op::DivScalar(a, s) => {
                let sv = self.value(*s).data()[0];
                if self.wants(*a) {
                    out.push((*a, g.scale(1.0 / sv)));
                }
                if self.wants(*s) {
                    let num = dot(g.data(), self.value(*a).data());
                    out.push((*s, Matrix::scalar(-num / (sv * sv))));
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).data()[0];
                if self.wants(*a) {
                    out.push((*a, g.scale(sv)));
                }
                if self.wants(*s) {
                    out.push((*s, Matrix::scalar(dot(g.data(), self.value(*a).data()))));
                }
            }
            Op::WeightNormCols { w, gain, norms } => {
                let vw = self.value(*w);
                let vg = self.value(*gain);
                let (rows, cols) = vw.shape();
                let mut dw = Matrix::zeros(rows, cols);
                let mut dg = Matrix::zeros(1, cols);
                for j in 0..cols {
                    let nj = norms[j];
                    let proj: f64 = (0..rows).map(|i| g[(i, j)] * vw[(i, j)] / nj).sum();
                    dg.data_mut()[j] = proj;
                    for i in 0..rows {
                        let what = vw[(i, j)] / nj;
                        dw[(i, j)] = vg.data()[j] / nj * (g[(i, j)] - what * proj);
                    }
                }
                if self.wants(*w) {
                    out.push((*w, dw));
                }
                if self.wants(*gain) {
                    out.push((*gain, dg));
                }
            }
        }
        Ok(out)
    }
}

/// Row-wise `softmax(x / tau)` computed with the row maximum subtracted.
/// With `causal`, entries with column > row get exactly zero weight.
pub fn softmax_rows(x: &Matrix, tau: f64, causal: bool) -> Result<Matrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    let (n, m) = x.shape();
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let limit = if causal { (i + 1).min(m) } else { m };
        let row = &x.row(i)[..limit];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let o = out.row_mut(i);
        let mut sum = 0.0;
        for (k, &v) in row.iter().enumerate() {
            let e = ((v - max) / tau).exp();
            o[k] = e;
            sum += e;
        }
        for v in &mut o[..limit] {
            *v /= sum;
        }
    }
    Ok(out)
}

fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row[t] - lse
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_K * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_grad_is_uniform() {
        let mut t = Tape::new();
        let w = t.param(Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let m = t.mean(w).unwrap();
        t.backward(m).unwrap();
        assert!(t
            .grad(w)
            .unwrap()
            .data()
            .iter()
            .all(|&g| (g - 1.0 / 6.0).abs() < 1e-16));
    }

    #[test]
    fn cross_entropy_grad_is_p_minus_onehot() {
        let u = [0.3, -1.2, 2.0, 0.5];
        let mut t = Tape::new();
        let x = t.param(Matrix::row_vector(&u));
        let l = t.cross_entropy(x, &[2]).unwrap();
        t.backward(l).unwrap();
        let p = softmax_rows(&Matrix::row_vector(&u), 1.0, false).unwrap();
        let mut expected = p.data().to_vec();
        expected[2] -= 1.0;
        for (a, b) in t.grad(x).unwrap().data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let mut t = Tape::new();
        let w = t.param(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_error_names_node() {
        let mut t = Tape::new();
        let a = t.param(Matrix::zeros(2, 3));
        let b = t.param(Matrix::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul (node 2)"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&Matrix::row_vector(&[0.0, 0.0, 0.0]), 1.0, false).unwrap();
        assert!(p.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-16));
        let p = softmax_rows(&Matrix::row_vector(&[10.0, 0.0]), 0.1, false).unwrap();
        assert!(p.data()[0] >= 1.0 - 1e-30);
        assert!(matches!(
            softmax_rows(&Matrix::row_vector(&[1.0]), 0.0, false),
            Err(Error::Domain(_))
        ));
        assert!(softmax_rows(&Matrix::row_vector(&[1.0]), -1.0, false).is_err());
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let x = Matrix::from_rows(&[&[1.0, 5.0, 2.0], &[0.0, 1.0, 9.0], &[1.0, 1.0, 1.0]]);
        let p = softmax_rows(&x, 1.0, true).unwrap();
        assert_eq!(p[(0, 0)], 1.0);
        assert_eq!(p[(0, 1)], 0.0);
        assert_eq!(p[(1, 2)], 0.0);
        for i in 0..3 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_get_no_grad() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::scalar(2.0));
        let b = t.param(Matrix::scalar(3.0));
        let c = t.matmul(a, b).unwrap();
        t.backward(c).unwrap();
        assert!(t.grad(a).is_none());
        assert_eq!(t.grad(b).unwrap().data(), &[2.0]);
    }
}
