//! Co-attention interest isolation and gated fusion of the behavior and
//! social user representations.

use rand::Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Number of interest representations mixed by the gate.
pub const INTEREST_COMPONENTS: usize = 6;

/// Gate input width: log interaction degree and log social degree.
pub const USER_FEATURES: usize = 2;

/// Trainable weights of the alignment block.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentParams {
    /// Behavior-side co-attention matrix (d×d).
    pub behavior_attn: DenseMatrix,
    /// Social-side co-attention matrix (d×d).
    pub social_attn: DenseMatrix,
    pub gate_w1: DenseMatrix,
    pub gate_b1: DenseMatrix,
    pub gate_w2: DenseMatrix,
    pub gate_b2: DenseMatrix,
}

impl AlignmentParams {
    /// Identity co-attention (per-coordinate agreement of the two towers) and a
    /// small random gate MLP that starts close to uniform routing.
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        AlignmentParams {
            behavior_attn: DenseMatrix::identity(dim),
            social_attn: DenseMatrix::identity(dim),
            gate_w1: DenseMatrix::random_normal(USER_FEATURES, hidden, std, rng),
            gate_b1: DenseMatrix::zeros(1, hidden),
            gate_w2: DenseMatrix::random_normal(hidden, INTEREST_COMPONENTS, std, rng),
            gate_b2: DenseMatrix::zeros(1, INTEREST_COMPONENTS),
        }
    }

    pub const NAMES: [&'static str; 6] = [
        "align.behavior_attn",
        "align.social_attn",
        "align.gate_w1",
        "align.gate_b1",
        "align.gate_w2",
        "align.gate_b2",
    ];

    pub fn tensors(&self) -> [&DenseMatrix; 6] {
        [
            &self.behavior_attn,
            &self.social_attn,
            &self.gate_w1,
            &self.gate_b1,
            &self.gate_w2,
            &self.gate_b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut DenseMatrix; 6] {
        [
            &mut self.behavior_attn,
            &mut self.social_attn,
            &mut self.gate_w1,
            &mut self.gate_b1,
            &mut self.gate_w2,
            &mut self.gate_b2,
        ]
    }

    pub fn from_tensors(mut t: Vec<DenseMatrix>) -> Result<Self> {
        if t.len() != 6 {
            return Err(Error::InvalidInput(format!(
                "expected 6 alignment tensors, got {}",
                t.len()
            )));
        }
        let gate_b2 = t.pop().unwrap();
        let gate_w2 = t.pop().unwrap();
        let gate_b1 = t.pop().unwrap();
        let gate_w1 = t.pop().unwrap();
        let social_attn = t.pop().unwrap();
        let behavior_attn = t.pop().unwrap();
        let p = AlignmentParams {
            behavior_attn,
            social_attn,
            gate_w1,
            gate_b1,
            gate_w2,
            gate_b2,
        };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.behavior_attn.rows();
        let h = self.gate_w1.cols();
        let expected = [
            (d, d),
            (d, d),
            (USER_FEATURES, h),
            (1, h),
            (h, INTEREST_COMPONENTS),
            (1, INTEREST_COMPONENTS),
        ];
        for (t, want) in self.tensors().iter().zip(expected) {
            if t.shape() != want {
                return Err(Error::shape("alignment params", t.shape(), want));
            }
        }
        Ok(())
    }
}

/// Tape handles for [`AlignmentParams`].
#[derive(Debug, Clone, Copy)]
pub struct AlignmentNodes {
    pub behavior_attn: NodeId,
    pub social_attn: NodeId,
    pub gate_w1: NodeId,
    pub gate_b1: NodeId,
    pub gate_w2: NodeId,
    pub gate_b2: NodeId,
}

impl AlignmentNodes {
    pub fn register(tape: &mut Tape, params: &AlignmentParams) -> Self {
        AlignmentNodes {
            behavior_attn: tape.parameter(params.behavior_attn.clone()),
            social_attn: tape.parameter(params.social_attn.clone()),
            gate_w1: tape.parameter(params.gate_w1.clone()),
            gate_b1: tape.parameter(params.gate_b1.clone()),
            gate_w2: tape.parameter(params.gate_w2.clone()),
            gate_b2: tape.parameter(params.gate_b2.clone()),
        }
    }

    pub fn ids(&self) -> [NodeId; 6] {
        [
            self.behavior_attn,
            self.social_attn,
            self.gate_w1,
            self.gate_b1,
            self.gate_w2,
            self.gate_b2,
        ]
    }
}

/// Per-user affinity weights over the d coordinates:
/// `w_b[i] = softmax(tanh((ê_i P_b) ⊙ e_i))`, `w_s[i] = softmax(tanh((e_i P_s) ⊙ ê_i))`.
pub fn coattention_weights(
    tape: &mut Tape,
    behavior: NodeId,
    social: NodeId,
    behavior_attn: NodeId,
    social_attn: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (b, s) = (tape.value(behavior).shape(), tape.value(social).shape());
    if b != s {
        return Err(Error::shape("coattention_weights", b, s));
    }
    let projected = tape.matmul(social, behavior_attn)?;
    let affinity = tape.mul(projected, behavior)?;
    let squashed = tape.tanh(affinity)?;
    let w_behavior = tape.row_softmax(squashed)?;

    let projected = tape.matmul(behavior, social_attn)?;
    let affinity = tape.mul(projected, social)?;
    let squashed = tape.tanh(affinity)?;
    let w_social = tape.row_softmax(squashed)?;
    Ok((w_behavior, w_social))
}

/// `{0,1}` mask of coordinates whose weight reaches the threshold.
pub fn threshold_mask(weights: &DenseMatrix, gamma: f64) -> DenseMatrix {
    weights.map(|w| if w >= gamma { 1.0 } else { 0.0 })
}

/// Splits `embedding` into aligned coordinates (`weight ≥ γ`) and the
/// remaining specific ones. The mask is a constant for the backward pass.
pub fn isolate_interests(tape: &mut Tape, embedding: NodeId, weights: NodeId, gamma: f64) -> Result<(NodeId, NodeId)> {
    let mask = threshold_mask(tape.value(weights), gamma);
    let aligned = tape.mask_mul(embedding, mask)?;
    let specific = tape.sub(embedding, aligned)?;
    Ok((aligned, specific))
}

/// The six interest representations routed by the gate.
#[derive(Debug, Clone, Copy)]
pub struct InterestBundle {
    pub behavior: NodeId,
    pub behavior_aligned: NodeId,
    pub behavior_specific: NodeId,
    pub social: NodeId,
    pub social_aligned: NodeId,
    pub social_specific: NodeId,
}

impl InterestBundle {
    pub fn components(&self) -> [NodeId; INTEREST_COMPONENTS] {
        [
            self.behavior,
            self.behavior_aligned,
            self.behavior_specific,
            self.social,
            self.social_aligned,
            self.social_specific,
        ]
    }
}

/// Per-user gate input `[ln(1 + interactions), ln(1 + friends)]`, each column
/// standardized over users. Constant columns standardize to zero.
pub fn user_features(interaction_degrees: &[usize], social_degrees: &[usize]) -> Result<DenseMatrix> {
    if interaction_degrees.len() != social_degrees.len() {
        return Err(Error::shape(
            "user_features",
            (interaction_degrees.len(), 1),
            (social_degrees.len(), 1),
        ));
    }
    let m = interaction_degrees.len();
    let mut fea = raw_user_features(interaction_degrees, social_degrees);
    if m == 0 {
        return Ok(fea);
    }
    for c in 0..USER_FEATURES {
        let mean = (0..m).map(|r| fea.get(r, c)).sum::<f64>() / m as f64;
        let var = (0..m).map(|r| (fea.get(r, c) - mean).powi(2)).sum::<f64>() / m as f64;
        let std = var.sqrt();
        for r in 0..m {
            let centered = fea.get(r, c) - mean;
            fea.set(r, c, if std > 0.0 { centered / std } else { 0.0 });
        }
    }
    Ok(fea)
}

#[inline]
pub fn log_degree(degree: f64) -> f64 {
    degree.ln_1p()
}

pub fn raw_user_features(interaction_degrees: &[usize], social_degrees: &[usize]) -> DenseMatrix {
    let mut fea = DenseMatrix::zeros(interaction_degrees.len(), USER_FEATURES);
    for (r, (&i, &s)) in interaction_degrees.iter().zip(social_degrees).enumerate() {
        fea.set(r, 0, log_degree(i as f64));
        fea.set(r, 1, log_degree(s as f64));
    }
    fea
}

/// Softmax routing weights `softmax(W2 tanh(W1 x + b1) + b2)`, one row per user.
pub fn gate_weights(tape: &mut Tape, features: NodeId, params: &AlignmentNodes) -> Result<NodeId> {
    let hidden = tape.matmul(features, params.gate_w1)?;
    let hidden = tape.add_row_broadcast(hidden, params.gate_b1)?;
    let hidden = tape.tanh(hidden)?;
    let logits = tape.matmul(hidden, params.gate_w2)?;
    let logits = tape.add_row_broadcast(logits, params.gate_b2)?;
    tape.row_softmax(logits)
}

/// `Ẽ[i] = Σ_c G[i,c] · bundle_c[i]`.
pub fn gated_fusion(tape: &mut Tape, bundle: &InterestBundle, gates: NodeId) -> Result<NodeId> {
    let mut fused: Option<NodeId> = None;
    for (c, component) in bundle.components().into_iter().enumerate() {
        let g = tape.column(gates, c)?;
        let weighted = tape.mul_col_broadcast(component, g)?;
        fused = Some(match fused {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }
    Ok(fused.expect("six components"))
}

/// `ŷ = ⟨users[row], items[item]⟩` for each `(row, item)` pair, as a column.
pub fn predict_scores(tape: &mut Tape, users: NodeId, items: NodeId, pairs: &[(usize, usize)]) -> Result<NodeId> {
    let u: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let i: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ue = tape.gather_rows(users, u)?;
    let ie = tape.gather_rows(items, i)?;
    let prod = tape.mul(ue, ie)?;
    tape.row_sum(prod)
}
