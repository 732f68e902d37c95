//! Parameters and forward pass shared by the three model variants.
//!
//! * `bpr`: `Ẽ_u = E_u⁽⁰⁾`, `E_v = E_v⁽⁰⁾`.
//! * `lightgcn`: `Ẽ_u = E_u`, `E_v` from interaction-graph propagation.
//! * `clsrec`: adds the social tower `Ê_u` and the reconstructed tower `E'_u`;
//!   `Ẽ_u` is the gated mix of the six interest representations, or
//!   `(E_u + Ê_u)/2` in the `no-cl-iia` ablation.

use rand::Rng;

use crate::alignment::{
    coattention_weights, gate_weights, gated_fusion, isolate_interests, user_features, AlignmentNodes, AlignmentParams,
    InterestBundle,
};
use crate::autodiff::{NodeId, Tape};
use crate::config::{ModelKind, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{normalize_bipartite, propagate_interaction, propagate_social, GraphOperators};
use crate::linalg::DenseMatrix;
use crate::svd::{propagate_reconstructed, truncated_svd, SvdFactors};

pub const USER_TABLE: &str = "users";
pub const ITEM_TABLE: &str = "items";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `E_u⁽⁰⁾` (M×d).
    pub users: DenseMatrix,
    /// `E_v⁽⁰⁾` (N×d).
    pub items: DenseMatrix,
    pub alignment: Option<AlignmentParams>,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &RunConfig, users: usize, items: usize, rng: &mut R) -> Self {
        let user_table = DenseMatrix::random_normal(users, cfg.dim, cfg.init_std, rng);
        let item_table = DenseMatrix::random_normal(items, cfg.dim, cfg.init_std, rng);
        let alignment = cfg
            .uses_alignment()
            .then(|| AlignmentParams::init(cfg.dim, cfg.gate_hidden, cfg.init_std, rng));
        ModelParams {
            users: user_table,
            items: item_table,
            alignment,
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut names = vec![USER_TABLE, ITEM_TABLE];
        if self.alignment.is_some() {
            names.extend(AlignmentParams::NAMES);
        }
        names
    }

    pub fn tensors(&self) -> Vec<&DenseMatrix> {
        let mut out = vec![&self.users, &self.items];
        if let Some(a) = &self.alignment {
            out.extend(a.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out = vec![&mut self.users, &mut self.items];
        if let Some(a) = &mut self.alignment {
            out.extend(a.tensors_mut());
        }
        out
    }

    pub fn from_named(mut named: Vec<(String, DenseMatrix)>) -> Result<Self> {
        let mut take = |name: &str| -> Option<DenseMatrix> {
            let pos = named.iter().position(|(n, _)| n == name)?;
            Some(named.swap_remove(pos).1)
        };
        let users = take(USER_TABLE).ok_or_else(|| Error::Corrupt("missing users table".into()))?;
        let items = take(ITEM_TABLE).ok_or_else(|| Error::Corrupt("missing items table".into()))?;
        let align: Vec<Option<DenseMatrix>> = AlignmentParams::NAMES.iter().map(|n| take(n)).collect();
        let alignment = if align.iter().all(Option::is_some) {
            Some(AlignmentParams::from_tensors(align.into_iter().flatten().collect())?)
        } else if align.iter().all(Option::is_none) {
            None
        } else {
            return Err(Error::Corrupt("incomplete alignment parameters".into()));
        };
        if users.cols() != items.cols() {
            return Err(Error::shape("model params", users.shape(), items.shape()));
        }
        Ok(ModelParams {
            users,
            items,
            alignment,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Registers every tensor as a trainable leaf, in [`ModelParams::tensors`] order.
    pub fn register(&self, tape: &mut Tape) -> ParamNodes {
        let users = tape.parameter(self.users.clone());
        let items = tape.parameter(self.items.clone());
        let alignment = self.alignment.as_ref().map(|a| AlignmentNodes::register(tape, a));
        ParamNodes {
            users,
            items,
            alignment,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParamNodes {
    pub users: NodeId,
    pub items: NodeId,
    pub alignment: Option<AlignmentNodes>,
}

impl ParamNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.users, self.items];
        if let Some(a) = &self.alignment {
            ids.extend(a.ids());
        }
        ids
    }

    /// Rebuilds handles from ids laid out as [`ParamNodes::ids`] returns them.
    pub fn from_ids(ids: &[NodeId]) -> Result<Self> {
        match ids.len() {
            2 => Ok(ParamNodes {
                users: ids[0],
                items: ids[1],
                alignment: None,
            }),
            8 => Ok(ParamNodes {
                users: ids[0],
                items: ids[1],
                alignment: Some(AlignmentNodes {
                    behavior_attn: ids[2],
                    social_attn: ids[3],
                    gate_w1: ids[4],
                    gate_b1: ids[5],
                    gate_w2: ids[6],
                    gate_b2: ids[7],
                }),
            }),
            n => Err(Error::InvalidInput(format!("expected 2 or 8 parameter nodes, got {n}"))),
        }
    }
}

/// Data-derived constants: normalized graphs, SVD factors, gate features.
#[derive(Debug, Clone)]
pub struct ModelContext {
    pub graphs: GraphOperators,
    pub svd: Option<SvdFactors>,
    pub user_features: DenseMatrix,
}

impl ModelContext {
    /// Builds graphs from the training split and, for `clsrec`, factorizes
    /// the (normalized, unless `svd_on_raw`) interaction matrix.
    pub fn build<R: Rng + ?Sized>(dataset: &Dataset, cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let svd = if cfg.uses_social() {
            let a = dataset.train_matrix()?;
            let input = if cfg.svd_on_raw { a } else { normalize_bipartite(&a)?.0 };
            Some(truncated_svd(&input, cfg.svd(), rng)?)
        } else {
            None
        };
        Self::with_svd(dataset, svd)
    }

    /// Builds the context around previously computed factors.
    pub fn with_svd(dataset: &Dataset, svd: Option<SvdFactors>) -> Result<Self> {
        let graphs = GraphOperators::build(&dataset.train_matrix()?, &dataset.social_matrix()?)?;
        let user_features = user_features(&dataset.train_degrees(), &dataset.social_degrees())?;
        Ok(ModelContext {
            graphs,
            svd,
            user_features,
        })
    }
}

/// Handles into one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub params: ParamNodes,
    /// Propagated `E_u` for all users.
    pub behavior: NodeId,
    /// Propagated `E_v` for all items.
    pub items: NodeId,
    /// `Ê_u` for all users.
    pub social: Option<NodeId>,
    /// `E'_u` for all users.
    pub reconstructed: Option<NodeId>,
    /// `Ẽ_u` for the requested rows, in request order.
    pub fused: NodeId,
    pub behavior_weights: Option<NodeId>,
    pub social_weights: Option<NodeId>,
    pub gates: Option<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Also propagate over the reconstructed social view.
    pub reconstructed: bool,
}

/// Runs the towers on `tape` from registered parameter nodes. `rows` selects
/// which users the fused representation is computed for (all when `None`).
pub fn forward(
    tape: &mut Tape,
    nodes: ParamNodes,
    ctx: &ModelContext,
    cfg: &RunConfig,
    rows: Option<&[usize]>,
    opts: ForwardOptions,
) -> Result<ForwardPass> {
    let (behavior, items) = match cfg.model {
        ModelKind::Bpr => (nodes.users, nodes.items),
        _ => propagate_interaction(
            tape,
            &ctx.graphs.interaction,
            &ctx.graphs.interaction_t,
            nodes.users,
            nodes.items,
            cfg.layers,
        )?,
    };
    let select = |tape: &mut Tape, node: NodeId| -> Result<NodeId> {
        match rows {
            Some(r) => tape.gather_rows(node, r.to_vec()),
            None => Ok(node),
        }
    };

    let mut pass = ForwardPass {
        params: nodes,
        behavior,
        items,
        social: None,
        reconstructed: None,
        fused: behavior,
        behavior_weights: None,
        social_weights: None,
        gates: None,
    };
    if cfg.model != ModelKind::ClsRec {
        pass.fused = select(tape, behavior)?;
        return Ok(pass);
    }

    let social = propagate_social(tape, &ctx.graphs.social, nodes.users, cfg.layers)?;
    pass.social = Some(social);
    if opts.reconstructed {
        let svd = ctx
            .svd
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("clsrec needs svd factors".into()))?;
        pass.reconstructed = Some(propagate_reconstructed(tape, svd, nodes.users, cfg.layers)?);
    }

    let b = select(tape, behavior)?;
    let s = select(tape, social)?;
    let Some(align) = nodes.alignment else {
        let sum = tape.add(b, s)?;
        pass.fused = tape.scale(sum, 0.5)?;
        return Ok(pass);
    };

    let (wb, ws) = coattention_weights(tape, b, s, align.behavior_attn, align.social_attn)?;
    let (b_aligned, b_specific) = isolate_interests(tape, b, wb, cfg.gamma_behavior())?;
    let (s_aligned, s_specific) = isolate_interests(tape, s, ws, cfg.gamma_social())?;
    let bundle = InterestBundle {
        behavior: b,
        behavior_aligned: b_aligned,
        behavior_specific: b_specific,
        social: s,
        social_aligned: s_aligned,
        social_specific: s_specific,
    };
    let features = match rows {
        Some(r) => ctx.user_features.gather_rows(r)?,
        None => ctx.user_features.clone(),
    };
    let features = tape.constant(features);
    let gates = gate_weights(tape, features, &align)?;
    pass.fused = gated_fusion(tape, &bundle, gates)?;
    pass.behavior_weights = Some(wb);
    pass.social_weights = Some(ws);
    pass.gates = Some(gates);
    Ok(pass)
}

/// Final user and item embeddings (`Ẽ_u`, `E_v`) for every user and item.
pub fn final_embeddings(
    params: &ModelParams,
    ctx: &ModelContext,
    cfg: &RunConfig,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let pass = forward(
        &mut tape,
        nodes,
        ctx,
        cfg,
        None,
        ForwardOptions { reconstructed: false },
    )?;
    Ok((tape.value(pass.fused).clone(), tape.value(pass.items).clone()))
}
