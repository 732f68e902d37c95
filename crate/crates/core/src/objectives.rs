//! Contrastive (InfoNCE) and pairwise ranking (BPR) losses.

use log::warn;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};

/// `Σ_i −log( exp(cos(a_i, b_i)/τ) / Σ_j exp(cos(a_i, b_j)/τ) )`.
///
/// Row `i` of `a` and `b` are the two views of the same user; every other row
/// of `b` is a negative for it.
pub fn info_nce(tape: &mut Tape, a: NodeId, b: NodeId, tau: f64) -> Result<NodeId> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.shape() != bv.shape() {
        return Err(Error::shape("info_nce", av.shape(), bv.shape()));
    }
    let batch = av.rows();
    let zero_rows = (0..batch)
        .filter(|&r| dot(av.row(r), av.row(r)) == 0.0 || dot(bv.row(r), bv.row(r)) == 0.0)
        .count();
    if zero_rows > 0 {
        warn!("info_nce: {zero_rows} zero-norm rows, cosine taken as 0");
    }
    let cos = tape.row_cosine(a, b)?;
    let logits = tape.scale(cos, 1.0 / tau)?;
    let log_probs = tape.row_log_softmax(logits)?;
    let diag = tape.mask_mul(log_probs, DenseMatrix::identity(batch))?;
    let total = tape.sum_all(diag)?;
    tape.scale(total, -1.0)
}

/// `−Σ ln σ(pos − neg) + λ Σ_t ‖t‖²` over the given regularized tables.
pub fn bpr_loss(tape: &mut Tape, pos: NodeId, neg: NodeId, regularized: &[NodeId], lambda: f64) -> Result<NodeId> {
    let margin = tape.sub(pos, neg)?;
    let log_sig = tape.log_sigmoid(margin)?;
    let total = tape.sum_all(log_sig)?;
    let mut loss = tape.scale(total, -1.0)?;
    if lambda != 0.0 && !regularized.is_empty() {
        let mut reg = tape.l2_norm_sq(regularized[0])?;
        for &t in &regularized[1..] {
            let sq = tape.l2_norm_sq(t)?;
            reg = tape.add(reg, sq)?;
        }
        let reg = tape.scale(reg, lambda)?;
        loss = tape.add(loss, reg)?;
    }
    Ok(loss)
}

/// `L_bpr + α · L_cl`. With `α = 0` the contrastive node is left off the
/// gradient path entirely.
pub fn total_loss(tape: &mut Tape, bpr: NodeId, cl: NodeId, alpha: f64) -> Result<NodeId> {
    if alpha == 0.0 {
        return Ok(bpr);
    }
    let weighted = tape.scale(cl, alpha)?;
    tape.add(bpr, weighted)
}
