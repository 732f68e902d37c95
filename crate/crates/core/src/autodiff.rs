//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records nodes in creation order. Every node's parents have a
//! smaller index, so [`Tape::backward`] walks the tape from the loss down to
//! index 0 and each node's adjoint is complete by the time it is visited.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};
use crate::sparse::SparseMatrix;

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A constant sparse operator together with its transpose, shared across tapes.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    forward: SparseMatrix,
    adjoint: SparseMatrix,
}

impl SparseOperator {
    pub fn new(forward: SparseMatrix) -> Self {
        let adjoint = forward.transpose();
        SparseOperator { forward, adjoint }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.forward
    }

    pub fn transposed(&self) -> &SparseMatrix {
        &self.adjoint
    }
}

/// The differentiable primitives. Non-node operands (scalars, index lists,
/// masks, sparse operators) travel inside the variant.
#[derive(Debug, Clone)]
pub enum Primitive {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Tanh,
    Exp,
    Ln,
    LogSigmoid,
    RowSoftmax,
    RowLogSoftmax,
    RowSum,
    SumAll,
    MeanAll,
    L2NormSq,
    GatherRows(Arc<[usize]>),
    /// Multiply by a constant {0,1} mask; the mask gets no gradient.
    MaskMul(Arc<DenseMatrix>),
    /// `C[i][j] = cos(a_i, b_j)`; zero-norm rows have cosine 0.
    RowCosine,
    SparseMatMul(Arc<SparseOperator>),
    /// `x (m×n) + b (1×n)` broadcast over rows.
    AddRowBroadcast,
    /// `x (m×n) ⊙ v (m×1)` broadcast over columns.
    MulColBroadcast,
    Column(usize),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Tanh => "tanh",
            Primitive::Exp => "exp",
            Primitive::Ln => "ln",
            Primitive::LogSigmoid => "log_sigmoid",
            Primitive::RowSoftmax => "row_softmax",
            Primitive::RowLogSoftmax => "row_log_softmax",
            Primitive::RowSum => "row_sum",
            Primitive::SumAll => "sum_all",
            Primitive::MeanAll => "mean_all",
            Primitive::L2NormSq => "l2_norm_sq",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::MaskMul(_) => "mask_mul",
            Primitive::RowCosine => "row_cosine",
            Primitive::SparseMatMul(_) => "sparse_matmul",
            Primitive::AddRowBroadcast => "add_row_broadcast",
            Primitive::MulColBroadcast => "mul_col_broadcast",
            Primitive::Column(_) => "column",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::RowCosine
            | Primitive::AddRowBroadcast
            | Primitive::MulColBroadcast => 2,
            _ => 1,
        }
    }
}

#[derive(Debug)]
enum NodeKind {
    Constant,
    Parameter,
    Op { prim: Primitive, inputs: Vec<NodeId> },
}

#[derive(Debug)]
struct Node {
    kind: NodeKind,
    value: DenseMatrix,
    requires_grad: bool,
    /// Op-specific forward intermediates reused by the adjoint.
    aux: Option<DenseMatrix>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<DenseMatrix> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
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

    fn push(&mut self, kind: NodeKind, value: DenseMatrix, requires_grad: bool, aux: Option<DenseMatrix>) -> NodeId {
        self.nodes.push(Node {
            kind,
            value,
            requires_grad,
            aux,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(NodeKind::Constant, value, false, None)
    }

    /// A trainable leaf; its gradient is kept by [`Tape::backward`].
    pub fn parameter(&mut self, value: DenseMatrix) -> NodeId {
        self.push(NodeKind::Parameter, value, true, None)
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.values()[0]
    }

    fn check(&self, id: NodeId) -> Result<&DenseMatrix> {
        self.nodes.get(id.0).map(|n| &n.value).ok_or(Error::IndexOutOfRange {
            op: "tape",
            index: id.0,
            len: self.nodes.len(),
        })
    }

    /// Records `prim` applied to `inputs` and returns the new node.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != prim.arity() {
            return Err(Error::InvalidInput(format!(
                "{} takes {} inputs, got {}",
                prim.name(),
                prim.arity(),
                inputs.len()
            )));
        }
        for &id in inputs {
            self.check(id)?;
        }
        let (value, aux) = self.forward(&prim, inputs)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", prim.name())));
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(
            NodeKind::Op {
                prim,
                inputs: inputs.to_vec(),
            },
            value,
            requires_grad,
            aux,
        ))
    }

    fn forward(&self, prim: &Primitive, inputs: &[NodeId]) -> Result<(DenseMatrix, Option<DenseMatrix>)> {
        let a = self.value(inputs[0]);
        let b = inputs.get(1).map(|&id| self.value(id));
        let out = match prim {
            Primitive::MatMul => a.matmul(b.unwrap())?,
            Primitive::Transpose => a.transpose(),
            Primitive::Add => a.add(b.unwrap())?,
            Primitive::Sub => a.sub(b.unwrap())?,
            Primitive::Mul => a.hadamard(b.unwrap())?,
            Primitive::Scale(s) => a.scale(*s),
            Primitive::Tanh => a.map(f64::tanh),
            Primitive::Exp => a.map(f64::exp),
            Primitive::Ln => {
                if let Some(pos) = a.values().iter().position(|&v| v <= 0.0) {
                    return Err(Error::NonFinite(format!(
                        "ln of non-positive entry {} at flat index {pos}",
                        a.values()[pos]
                    )));
                }
                a.map(f64::ln)
            }
            Primitive::LogSigmoid => a.map(log_sigmoid),
            Primitive::RowSoftmax => row_softmax(a),
            Primitive::RowLogSoftmax => {
                let soft = row_softmax(a);
                let mut out = a.clone();
                for r in 0..a.rows() {
                    let lse = log_sum_exp(a.row(r));
                    out.row_mut(r).iter_mut().for_each(|v| *v -= lse);
                }
                return Ok((out, Some(soft)));
            }
            Primitive::RowSum => {
                let sums: Vec<f64> = (0..a.rows()).map(|r| a.row(r).iter().sum()).collect();
                DenseMatrix::column(&sums)
            }
            Primitive::SumAll => DenseMatrix::scalar(a.sum()),
            Primitive::MeanAll => {
                if a.is_empty() {
                    return Err(Error::InvalidInput("mean of an empty matrix".into()));
                }
                DenseMatrix::scalar(a.sum() / a.len() as f64)
            }
            Primitive::L2NormSq => DenseMatrix::scalar(a.frobenius_sq()),
            Primitive::GatherRows(idx) => a.gather_rows(idx)?,
            Primitive::MaskMul(mask) => {
                if mask.values().iter().any(|&m| m != 0.0 && m != 1.0) {
                    return Err(Error::InvalidInput("mask entries must be 0 or 1".into()));
                }
                a.zip_map(mask, "mask_mul", |x, m| x * m)?
            }
            Primitive::RowCosine => {
                let b = b.unwrap();
                if a.cols() != b.cols() {
                    return Err(Error::shape("row_cosine", a.shape(), b.shape()));
                }
                let na = normalize_rows(a);
                let nb = normalize_rows(b);
                let out = na.matmul_t(&nb)?;
                // aux holds row norms: first a's, then b's.
                let norms: Vec<f64> = (0..a.rows())
                    .map(|r| row_norm(a.row(r)))
                    .chain((0..b.rows()).map(|r| row_norm(b.row(r))))
                    .collect();
                return Ok((out, Some(DenseMatrix::column(&norms))));
            }
            Primitive::SparseMatMul(op) => op.matrix().mul_dense(a)?,
            Primitive::AddRowBroadcast => {
                let b = b.unwrap();
                if b.rows() != 1 || b.cols() != a.cols() {
                    return Err(Error::shape("add_row_broadcast", a.shape(), b.shape()));
                }
                let mut out = a.clone();
                for r in 0..out.rows() {
                    out.row_mut(r).iter_mut().zip(b.values()).for_each(|(o, &x)| *o += x);
                }
                out
            }
            Primitive::MulColBroadcast => {
                let v = b.unwrap();
                if v.cols() != 1 || v.rows() != a.rows() {
                    return Err(Error::shape("mul_col_broadcast", a.shape(), v.shape()));
                }
                let mut out = a.clone();
                for r in 0..out.rows() {
                    let s = v.values()[r];
                    out.row_mut(r).iter_mut().for_each(|o| *o *= s);
                }
                out
            }
            Primitive::Column(c) => {
                if *c >= a.cols() {
                    return Err(Error::IndexOutOfRange {
                        op: "column",
                        index: *c,
                        len: a.cols(),
                    });
                }
                let col: Vec<f64> = (0..a.rows()).map(|r| a.get(r, *c)).collect();
                DenseMatrix::column(&col)
            }
        };
        Ok((out, None))
    }

    /// Propagates adjoints from the scalar `loss` node. The returned map keeps
    /// gradients for parameter leaves only; intermediate adjoints are dropped
    /// as soon as they have been pushed to their inputs.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.check(loss)?;
        if loss_value.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: loss_value.rows(),
                cols: loss_value.cols(),
            });
        }
        let mut grads: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseMatrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let (prim, inputs) = match &node.kind {
                NodeKind::Op { prim, inputs } => (prim, inputs),
                _ => continue,
            };
            let Some(g) = grads[i].take() else { continue };
            for (slot, contribution) in self.adjoints(node, prim, inputs, &g)?.into_iter().enumerate() {
                let input = inputs[slot];
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let Some(contribution) = contribution else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    empty => *empty = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn adjoints(
        &self,
        node: &Node,
        prim: &Primitive,
        inputs: &[NodeId],
        g: &DenseMatrix,
    ) -> Result<Vec<Option<DenseMatrix>>> {
        let a = self.value(inputs[0]);
        let b = inputs.get(1).map(|&id| self.value(id));
        let y = &node.value;
        let wants = |k: usize| self.nodes[inputs[k].0].requires_grad;
        let out = match prim {
            Primitive::MatMul => {
                let b = b.unwrap();
                vec![
                    wants(0).then(|| g.matmul_t(b)).transpose()?,
                    wants(1).then(|| a.t_matmul(g)).transpose()?,
                ]
            }
            Primitive::Transpose => vec![Some(g.transpose())],
            Primitive::Add => vec![Some(g.clone()), Some(g.clone())],
            Primitive::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
            Primitive::Mul => {
                let b = b.unwrap();
                vec![
                    wants(0).then(|| g.hadamard(b)).transpose()?,
                    wants(1).then(|| g.hadamard(a)).transpose()?,
                ]
            }
            Primitive::Scale(s) => vec![Some(g.scale(*s))],
            Primitive::Tanh => vec![Some(g.zip_map(y, "tanh'", |g, t| g * (1.0 - t * t))?)],
            Primitive::Exp => vec![Some(g.hadamard(y)?)],
            Primitive::Ln => vec![Some(g.zip_map(a, "ln'", |g, x| g / x)?)],
            Primitive::LogSigmoid => vec![Some(g.zip_map(a, "log_sigmoid'", |g, x| g * sigmoid(-x))?)],
            Primitive::RowSoftmax => {
                let mut dx = g.hadamard(y)?;
                for r in 0..dx.rows() {
                    let s = dot(g.row(r), y.row(r));
                    for (d, &p) in dx.row_mut(r).iter_mut().zip(y.row(r)) {
                        *d -= p * s;
                    }
                }
                vec![Some(dx)]
            }
            Primitive::RowLogSoftmax => {
                let soft = node.aux.as_ref().expect("log-softmax caches its softmax");
                let mut dx = g.clone();
                for r in 0..dx.rows() {
                    let s: f64 = g.row(r).iter().sum();
                    for (d, &p) in dx.row_mut(r).iter_mut().zip(soft.row(r)) {
                        *d -= p * s;
                    }
                }
                vec![Some(dx)]
            }
            Primitive::RowSum => {
                let mut dx = DenseMatrix::zeros(a.rows(), a.cols());
                for r in 0..a.rows() {
                    let s = g.values()[r];
                    dx.row_mut(r).iter_mut().for_each(|d| *d = s);
                }
                vec![Some(dx)]
            }
            Primitive::SumAll => vec![Some(DenseMatrix::filled(a.rows(), a.cols(), g.values()[0]))],
            Primitive::MeanAll => vec![Some(DenseMatrix::filled(
                a.rows(),
                a.cols(),
                g.values()[0] / a.len() as f64,
            ))],
            Primitive::L2NormSq => vec![Some(a.scale(2.0 * g.values()[0]))],
            Primitive::GatherRows(idx) => {
                let mut dx = DenseMatrix::zeros(a.rows(), a.cols());
                for (k, &i) in idx.iter().enumerate() {
                    dx.row_mut(i).iter_mut().zip(g.row(k)).for_each(|(d, &x)| *d += x);
                }
                vec![Some(dx)]
            }
            Primitive::MaskMul(mask) => vec![Some(g.hadamard(mask)?)],
            Primitive::RowCosine => {
                let b = b.unwrap();
                let norms = node.aux.as_ref().expect("cosine caches norms").values();
                let (na_norms, nb_norms) = norms.split_at(a.rows());
                let na = normalize_rows(a);
                let nb = normalize_rows(b);
                let da = wants(0)
                    .then(|| g.matmul(&nb).map(|dn| normalize_adjoint(&na, na_norms, &dn)))
                    .transpose()?;
                let db = wants(1)
                    .then(|| g.t_matmul(&na).map(|dn| normalize_adjoint(&nb, nb_norms, &dn)))
                    .transpose()?;
                vec![da, db]
            }
            Primitive::SparseMatMul(op) => vec![Some(op.transposed().mul_dense(g)?)],
            Primitive::AddRowBroadcast => {
                let mut db = DenseMatrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    db.values_mut().iter_mut().zip(g.row(r)).for_each(|(d, &x)| *d += x);
                }
                vec![Some(g.clone()), Some(db)]
            }
            Primitive::MulColBroadcast => {
                let v = b.unwrap();
                let mut dx = g.clone();
                let mut dv = DenseMatrix::zeros(v.rows(), 1);
                for r in 0..g.rows() {
                    let s = v.values()[r];
                    dx.row_mut(r).iter_mut().for_each(|d| *d *= s);
                    dv.values_mut()[r] = dot(g.row(r), a.row(r));
                }
                vec![Some(dx), Some(dv)]
            }
            Primitive::Column(c) => {
                let mut dx = DenseMatrix::zeros(a.rows(), a.cols());
                for r in 0..a.rows() {
                    dx.set(r, *c, g.values()[r]);
                }
                vec![Some(dx)]
            }
        };
        Ok(out)
    }

    // Typed shorthands over `apply`.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(s), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Ln, &[a])
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::LogSigmoid, &[a])
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::RowSoftmax, &[a])
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::RowLogSoftmax, &[a])
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::RowSum, &[a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SumAll, &[a])
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MeanAll, &[a])
    }

    pub fn l2_norm_sq(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::L2NormSq, &[a])
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: impl Into<Arc<[usize]>>) -> Result<NodeId> {
        self.apply(Primitive::GatherRows(indices.into()), &[a])
    }

    pub fn mask_mul(&mut self, a: NodeId, mask: DenseMatrix) -> Result<NodeId> {
        self.apply(Primitive::MaskMul(Arc::new(mask)), &[a])
    }

    pub fn row_cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::RowCosine, &[a, b])
    }

    pub fn sparse_matmul(&mut self, op: &Arc<SparseOperator>, x: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SparseMatMul(Arc::clone(op)), &[x])
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Primitive::AddRowBroadcast, &[x, bias])
    }

    pub fn mul_col_broadcast(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MulColBroadcast, &[x, v])
    }

    pub fn column(&mut self, x: NodeId, c: usize) -> Result<NodeId> {
        self.apply(Primitive::Column(c), &[x])
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

/// `ln σ(x)` without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax along each row with the row maximum subtracted first.
pub fn row_softmax(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn row_norm(row: &[f64]) -> f64 {
    dot(row, row).sqrt()
}

fn normalize_rows(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let n = row_norm(x.row(r));
        let row = out.row_mut(r);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

/// Adjoint of `x ↦ x/‖x‖` row-wise, given the normalized rows and norms.
fn normalize_adjoint(unit: &DenseMatrix, norms: &[f64], d_unit: &DenseMatrix) -> DenseMatrix {
    let mut dx = DenseMatrix::zeros(unit.rows(), unit.cols());
    for (r, &n) in norms.iter().enumerate().take(unit.rows()) {
        if n == 0.0 {
            continue;
        }
        let proj = dot(unit.row(r), d_unit.row(r));
        for ((d, &u), &du) in dx.row_mut(r).iter_mut().zip(unit.row(r)).zip(d_unit.row(r)) {
            *d = (du - u * proj) / n;
        }
    }
    dx
}

/// Compares tape gradients with central differences of step `epsilon`.
///
/// `build` receives a fresh tape and one parameter node per entry of `params`
/// and must return a scalar loss node. Returns the maximum over all parameter
/// entries of `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(build: F, params: &[DenseMatrix], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidInput(format!("epsilon {epsilon} outside (0, 1e-2]")));
    }
    let evaluate = |values: &[DenseMatrix]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.parameter(v.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok((tape, ids, loss))
    };

    let (tape, ids, loss) = evaluate(params)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<DenseMatrix> = params.to_vec();
    for (p, id) in ids.iter().enumerate() {
        let zeros = DenseMatrix::zeros(params[p].rows(), params[p].cols());
        let analytic = grads.get(*id).unwrap_or(&zeros);
        for k in 0..params[p].len() {
            let original = params[p].values()[k];
            let mut probe = |x: f64| -> Result<f64> {
                work[p].values_mut()[k] = x;
                let (t, _, l) = evaluate(&work).map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (param {p}, entry {k})")),
                    other => other,
                })?;
                Ok(t.scalar(l))
            };
            let plus = probe(original + epsilon)?;
            let minus = probe(original - epsilon)?;
            work[p].values_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("finite difference at param {p}, entry {k}")));
            }
            let a = analytic.values()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::new();
        let i = tape.constant(DenseMatrix::identity(2));
        let x = tape.constant(DenseMatrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, 7.0]]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(DenseMatrix::zeros(1, 3));
        let y = tape.row_softmax(x).unwrap();
        for &v in tape.value(y).values() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(DenseMatrix::from_rows(&[vec![1000.0, 0.0, -1000.0]]));
        let y = tape.row_softmax(x).unwrap();
        assert!(close(tape.value(y).get(0, 0), 1.0, 1e-12));
    }

    #[test]
    fn mean_adjoint_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.parameter(DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let loss = tape.mean_all(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &DenseMatrix::filled(2, 2, 0.25));
    }

    #[test]
    fn square_norm_adjoint() {
        let mut tape = Tape::new();
        let x = tape.parameter(DenseMatrix::scalar(3.0));
        let loss = tape.l2_norm_sq(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().values(), &[6.0]);
    }

    #[test]
    fn log_sigmoid_of_equal_scores() {
        let mut tape = Tape::new();
        let a = tape.parameter(DenseMatrix::scalar(0.7));
        let b = tape.parameter(DenseMatrix::scalar(0.7));
        let diff = tape.sub(a, b).unwrap();
        let loss = tape.log_sigmoid(diff).unwrap();
        assert!(close(tape.scalar(loss), (0.5f64).ln(), 1e-15));
        let g = tape.backward(loss).unwrap();
        assert!(close(g.get(a).unwrap().values()[0], 0.5, 1e-15));
        assert!(close(g.get(b).unwrap().values()[0], -0.5, 1e-15));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.parameter(DenseMatrix::zeros(2, 1));
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss { rows: 2, cols: 1 })
        ));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x ⊙ x) via a duplicated input: gradient 2x.
        let mut tape = Tape::new();
        let x = tape.parameter(DenseMatrix::from_rows(&[vec![1.5, -2.0]]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().values(), &[3.0, -4.0]);

        // x used three times through add: gradient 3.
        let mut tape = Tape::new();
        let x = tape.parameter(DenseMatrix::from_rows(&[vec![0.3]]));
        let twice = tape.add(x, x).unwrap();
        let thrice = tape.add(twice, x).unwrap();
        let loss = tape.sum_all(thrice).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().values(), &[3.0]);
    }

    #[test]
    fn masked_entries_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.parameter(DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0]]));
        let m = tape
            .mask_mul(x, DenseMatrix::from_rows(&[vec![1.0, 0.0, 1.0]]))
            .unwrap();
        let loss = tape.l2_norm_sq(m).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().values(), &[2.0, 0.0, 6.0]);
    }

    #[test]
    fn mask_must_be_binary() {
        let mut tape = Tape::new();
        let x = tape.parameter(DenseMatrix::zeros(1, 2));
        assert!(tape.mask_mul(x, DenseMatrix::from_rows(&[vec![0.5, 1.0]])).is_err());
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.parameter(DenseMatrix::zeros(2, 2));
        assert!(matches!(
            tape.gather_rows(x, vec![0, 2]),
            Err(Error::IndexOutOfRange { index: 2, .. })
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.parameter(DenseMatrix::zeros(2, 3));
        let b = tape.parameter(DenseMatrix::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        let c = tape.constant(DenseMatrix::zeros(3, 2));
        assert!(matches!(tape.add(a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_norm_cosine_is_zero() {
        let mut tape = Tape::new();
        let a = tape.parameter(DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]));
        let b = tape.parameter(DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]));
        let c = tape.row_cosine(a, b).unwrap();
        assert_eq!(tape.value(c).row(0), &[0.0, 0.0]);
        let loss = tape.sum_all(c).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().row(0), &[0.0, 0.0]);
    }

    #[test]
    fn square_passes_grad_check() {
        let err = grad_check(|t, p| t.l2_norm_sq(p[0]), &[DenseMatrix::scalar(3.0)], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_mean_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DenseMatrix::random_uniform(3, 4, -1.0, 1.0, &mut rng);
        let w = DenseMatrix::random_uniform(3, 4, -1.0, 1.0, &mut rng);
        let err = grad_check(
            move |t, p| {
                let s = t.row_softmax(p[0])?;
                let wc = t.constant(w.clone());
                let s = t.mul(s, wc)?;
                t.mean_all(s)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn grad_check_rejects_bad_epsilon() {
        assert!(grad_check(|t, p| t.sum_all(p[0]), &[DenseMatrix::scalar(1.0)], 0.1).is_err());
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::new();
        let x = tape.parameter(DenseMatrix::scalar(-1.0));
        assert!(matches!(tape.ln(x), Err(Error::NonFinite(_))));
    }
}
