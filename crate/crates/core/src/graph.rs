//! Symmetric normalization of the interaction and social graphs and
//! layer-averaged propagation over them.

use std::sync::Arc;

use crate::autodiff::{NodeId, SparseOperator, Tape};
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PropagationConfig {
    pub layers: usize,
    pub dim: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig { layers: 3, dim: 64 }
    }
}

fn inv_sqrt_degrees(degrees: &[usize]) -> Vec<f64> {
    degrees
        .iter()
        .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect()
}

fn require_binary(m: &SparseMatrix, what: &str) -> Result<()> {
    if m.values().iter().any(|&v| v != 1.0) {
        return Err(Error::InvalidInput(format!("{what} must be binary")));
    }
    Ok(())
}

/// `Ã[i,j] = A[i,j] / sqrt(deg_u(i) · deg_v(j))` and its transpose.
/// Zero-degree rows and columns stay zero.
pub fn normalize_bipartite(a: &SparseMatrix) -> Result<(SparseMatrix, SparseMatrix)> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::InvalidInput("interaction matrix is empty".into()));
    }
    require_binary(a, "interaction matrix")?;
    let du = inv_sqrt_degrees(&a.row_degrees());
    let dv = inv_sqrt_degrees(&a.col_degrees());
    let norm = a.map_values(|r, c, v| v * du[r] * dv[c]);
    let t = norm.transpose();
    Ok((norm, t))
}

/// `Ŝ[i,j] = S[i,j] / sqrt(deg(i) · deg(j))` for an undirected graph without
/// self-loops.
pub fn normalize_social(s: &SparseMatrix) -> Result<SparseMatrix> {
    if s.rows() != s.cols() {
        return Err(Error::shape("normalize_social", s.shape(), s.shape()));
    }
    require_binary(s, "social matrix")?;
    if let Some((r, _, _)) = s.iter().find(|&(r, c, _)| r == c) {
        return Err(Error::InvalidInput(format!("social graph has a self-loop at user {r}")));
    }
    if !s.is_symmetric() {
        return Err(Error::InvalidInput("social graph is not symmetric".into()));
    }
    let d = inv_sqrt_degrees(&s.row_degrees());
    // d[r]*d[c] and d[c]*d[r] round identically, so symmetry is exact.
    Ok(s.map_values(|r, c, v| v * (d[r] * d[c])))
}

/// Normalized interaction and social operators, built once per dataset.
#[derive(Debug, Clone)]
pub struct GraphOperators {
    /// `Ã` (users × items).
    pub interaction: Arc<SparseOperator>,
    /// `Ãᵀ` (items × users).
    pub interaction_t: Arc<SparseOperator>,
    pub social: Arc<SparseOperator>,
}

impl GraphOperators {
    pub fn build(interactions: &SparseMatrix, social: &SparseMatrix) -> Result<Self> {
        let (norm, norm_t) = normalize_bipartite(interactions)?;
        let social = normalize_social(social)?;
        Ok(GraphOperators {
            interaction: Arc::new(SparseOperator::new(norm)),
            interaction_t: Arc::new(SparseOperator::new(norm_t)),
            social: Arc::new(SparseOperator::new(social)),
        })
    }

    pub fn users(&self) -> usize {
        self.interaction.matrix().rows()
    }

    pub fn items(&self) -> usize {
        self.interaction.matrix().cols()
    }
}

fn layer_mean(tape: &mut Tape, layers: &[NodeId]) -> Result<NodeId> {
    let mut acc = layers[0];
    for &l in &layers[1..] {
        acc = tape.add(acc, l)?;
    }
    if layers.len() == 1 {
        return Ok(acc);
    }
    tape.scale(acc, 1.0 / layers.len() as f64)
}

/// Alternating user/item propagation over `Ã`, averaged over layers 0..=L.
/// `norm_t` must hold `Ãᵀ`.
pub fn propagate_interaction(
    tape: &mut Tape,
    norm: &Arc<SparseOperator>,
    norm_t: &Arc<SparseOperator>,
    users0: NodeId,
    items0: NodeId,
    layers: usize,
) -> Result<(NodeId, NodeId)> {
    let (m, n) = norm.matrix().shape();
    if norm_t.matrix().shape() != (n, m) {
        return Err(Error::shape(
            "propagate_interaction",
            norm.matrix().shape(),
            norm_t.matrix().shape(),
        ));
    }
    let (ur, ir) = (tape.value(users0).rows(), tape.value(items0).rows());
    if ur != m || ir != n || tape.value(users0).cols() != tape.value(items0).cols() {
        return Err(Error::shape(
            "propagate_interaction",
            tape.value(users0).shape(),
            tape.value(items0).shape(),
        ));
    }
    let mut user_layers = vec![users0];
    let mut item_layers = vec![items0];
    for _ in 0..layers {
        let (u_prev, v_prev) = (*user_layers.last().unwrap(), *item_layers.last().unwrap());
        user_layers.push(tape.sparse_matmul(norm, v_prev)?);
        item_layers.push(tape.sparse_matmul(norm_t, u_prev)?);
    }
    Ok((layer_mean(tape, &user_layers)?, layer_mean(tape, &item_layers)?))
}

/// Social-tower propagation `Ê⁽ˡ⁾ = Ŝ · Ê⁽ˡ⁻¹⁾` from the shared layer-0 user
/// embeddings, averaged over layers 0..=L.
pub fn propagate_social(
    tape: &mut Tape,
    social: &Arc<SparseOperator>,
    users0: NodeId,
    layers: usize,
) -> Result<NodeId> {
    let mut out = vec![users0];
    for _ in 0..layers {
        let prev = *out.last().unwrap();
        out.push(tape.sparse_matmul(social, prev)?);
    }
    layer_mean(tape, &out)
}
