//! BPR triple sampling, Adam, and the epoch loop with validation-based early
//! stopping.

use log::warn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::threshold_mask;
use crate::autodiff::{NodeId, Tape};
use crate::checkpoint::{Checkpoint, CheckpointMeta, EvalRecord};
use crate::config::{ModelKind, RunConfig};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};
use crate::metrics::{cold_users, evaluate_rankings, rank_topk, MetricsReport};
use crate::model::{final_embeddings, forward, ForwardOptions, ModelContext, ModelParams, ParamNodes};
use crate::objectives::{bpr_loss, info_nce, total_loss};

/// RNG streams derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_SVD: u64 = 1;
const STREAM_SAMPLER: u64 = 2;

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub user: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Uniform user, uniform positive, rejection-sampled negative.
#[derive(Debug, Clone)]
pub struct TripleSampler {
    items_by_user: Vec<Vec<usize>>,
    eligible: Vec<usize>,
    items: usize,
}

impl TripleSampler {
    /// `items_by_user` must be sorted per user. Users with no interactions or
    /// with every item positive are excluded.
    pub fn new(items_by_user: Vec<Vec<usize>>, items: usize) -> Result<Self> {
        let mut saturated = 0usize;
        let eligible: Vec<usize> = items_by_user
            .iter()
            .enumerate()
            .filter(|(_, v)| {
                if v.len() >= items && !v.is_empty() {
                    saturated += 1;
                    return false;
                }
                !v.is_empty()
            })
            .map(|(u, _)| u)
            .collect();
        if saturated > 0 {
            warn!("{saturated} users interact with every item and are excluded from sampling");
        }
        if eligible.is_empty() {
            return Err(Error::InvalidInput("no user can be sampled".into()));
        }
        Ok(TripleSampler {
            items_by_user,
            eligible,
            items,
        })
    }

    pub fn eligible_users(&self) -> &[usize] {
        &self.eligible
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Triple> {
        (0..batch)
            .map(|_| {
                let user = self.eligible[rng.random_range(0..self.eligible.len())];
                let pos = &self.items_by_user[user];
                let positive = pos[rng.random_range(0..pos.len())];
                let negative = loop {
                    let j = rng.random_range(0..self.items);
                    if pos.binary_search(&j).is_err() {
                        break j;
                    }
                };
                Triple {
                    user,
                    positive,
                    negative,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<DenseMatrix>,
    second: Vec<DenseMatrix>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
            second: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. A `None` gradient counts as zero. Nothing is
    /// modified if any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut [&mut DenseMatrix], grads: &[Option<DenseMatrix>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params[i].shape() {
                    return Err(Error::shape("adam", params[i].shape(), g.shape()));
                }
                if let Some(pos) = g.values().iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of tensor {i} at flat index {pos}")));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.first[i].values_mut();
            let v = self.second[i].values_mut();
            let values = p.values_mut();
            match &grads[i] {
                Some(g) => {
                    for (k, &gk) in g.values().iter().enumerate() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                        values[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                    }
                }
                None => {
                    for k in 0..values.len() {
                        m[k] *= self.beta1;
                        v[k] *= self.beta2;
                        values[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Loss nodes of one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub total: NodeId,
    pub bpr: NodeId,
    pub contrastive: Option<NodeId>,
}

/// Builds `L_bpr + α L_cl` for a batch of triples on `tape`.
pub fn build_step_loss(
    tape: &mut Tape,
    nodes: ParamNodes,
    ctx: &ModelContext,
    cfg: &RunConfig,
    triples: &[Triple],
) -> Result<StepLoss> {
    let rows: Vec<usize> = triples.iter().map(|t| t.user).collect();
    let opts = ForwardOptions {
        reconstructed: cfg.model == ModelKind::ClsRec,
    };
    let pass = forward(tape, nodes, ctx, cfg, Some(&rows), opts)?;

    let pos_rows: Vec<usize> = triples.iter().map(|t| t.positive).collect();
    let neg_rows: Vec<usize> = triples.iter().map(|t| t.negative).collect();
    let pos_items = tape.gather_rows(pass.items, pos_rows.clone())?;
    let neg_items = tape.gather_rows(pass.items, neg_rows.clone())?;
    let pos = tape.mul(pass.fused, pos_items)?;
    let pos = tape.row_sum(pos)?;
    let neg = tape.mul(pass.fused, neg_items)?;
    let neg = tape.row_sum(neg)?;

    let regularized = if cfg.reg_batch_rows {
        let u = tape.gather_rows(nodes.users, rows.clone())?;
        let p = tape.gather_rows(nodes.items, pos_rows)?;
        let n = tape.gather_rows(nodes.items, neg_rows)?;
        vec![u, p, n]
    } else {
        vec![nodes.users, nodes.items]
    };
    let bpr = bpr_loss(tape, pos, neg, &regularized, cfg.lambda)?;

    let contrastive = match (pass.social, pass.reconstructed) {
        (Some(social), Some(recon)) => {
            let (a, b) = if cfg.cl_full_batch {
                (social, recon)
            } else {
                let mut users = rows;
                users.sort_unstable();
                users.dedup();
                (
                    tape.gather_rows(social, users.clone())?,
                    tape.gather_rows(recon, users)?,
                )
            };
            Some(info_nce(tape, a, b, cfg.tau)?)
        }
        _ => None,
    };
    let total = match contrastive {
        Some(cl) => total_loss(tape, bpr, cl, cfg.alpha)?,
        None => bpr,
    };
    Ok(StepLoss {
        total,
        bpr,
        contrastive,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss_bpr: f64,
    pub loss_cl: f64,
}

/// One optimizer step on a fresh tape.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut Adam,
    ctx: &ModelContext,
    cfg: &RunConfig,
    triples: &[Triple],
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let loss = build_step_loss(&mut tape, nodes, ctx, cfg, triples)?;
    let mut grads = tape.backward(loss.total)?;
    let stats = StepStats {
        loss_bpr: tape.scalar(loss.bpr),
        loss_cl: loss.contrastive.map_or(0.0, |c| tape.scalar(c)),
    };
    let grads: Vec<Option<DenseMatrix>> = nodes.ids().into_iter().map(|id| grads.take(id)).collect();
    drop(tape);
    adam.step(&mut params.tensors_mut(), &grads)?;
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub steps: usize,
    pub loss_bpr: f64,
    pub loss_cl: f64,
}

pub fn steps_per_epoch(train_pairs: usize, batch: usize) -> usize {
    train_pairs.div_ceil(batch).max(1)
}

/// `⌈|train| / B⌉` steps; reports mean per-step losses.
pub fn train_epoch<R: Rng + ?Sized>(
    params: &mut ModelParams,
    adam: &mut Adam,
    ctx: &ModelContext,
    cfg: &RunConfig,
    sampler: &TripleSampler,
    train_pairs: usize,
    rng: &mut R,
) -> Result<EpochStats> {
    let steps = steps_per_epoch(train_pairs, cfg.batch_size);
    let (mut bpr, mut cl) = (0.0, 0.0);
    for _ in 0..steps {
        let triples = sampler.sample(cfg.batch_size, rng);
        let s = train_step(params, adam, ctx, cfg, &triples)?;
        bpr += s.loss_bpr;
        cl += s.loss_cl;
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("model parameters after epoch".into()));
    }
    Ok(EpochStats {
        steps,
        loss_bpr: bpr / steps as f64,
        loss_cl: cl / steps as f64,
    })
}

/// Metrics on `split`. Validation ranks exclude training items; test ranks
/// exclude training and validation items.
pub fn evaluate_split(
    params: &ModelParams,
    ctx: &ModelContext,
    cfg: &RunConfig,
    dataset: &Dataset,
    split: Split,
    ks: &[usize],
    cold_threshold: usize,
) -> Result<MetricsReport> {
    let (users, items) = final_embeddings(params, ctx, cfg)?;
    let truth = dataset.items_by_user(split);
    let mut exclude = dataset.items_by_user(Split::Train);
    if split == Split::Test {
        for (ex, val) in exclude.iter_mut().zip(dataset.items_by_user(Split::Validation)) {
            ex.extend(val);
            ex.sort_unstable();
        }
    }
    let cold = cold_users(&dataset.train_degrees(), cold_threshold);
    evaluate_rankings(&users, &items, &truth, &exclude, &cold, ks, cold_threshold)
}

/// Everything `fit` needs besides the dataset and config.
pub struct FitRun {
    pub params: ModelParams,
    pub ctx: ModelContext,
}

impl FitRun {
    pub fn init(dataset: &Dataset, cfg: &RunConfig) -> Result<Self> {
        let mut init_rng = seeded_stream(cfg.seed, STREAM_INIT);
        let mut svd_rng = seeded_stream(cfg.seed, STREAM_SVD);
        let params = ModelParams::init(cfg, dataset.users(), dataset.items(), &mut init_rng);
        let ctx = ModelContext::build(dataset, cfg, &mut svd_rng)?;
        Ok(FitRun { params, ctx })
    }
}

/// Trains with early stopping on validation Recall@20 and returns the best
/// parameters. `on_eval` sees every validation evaluation as it happens.
pub fn fit(dataset: &Dataset, cfg: &RunConfig, mut on_eval: impl FnMut(&EvalRecord)) -> Result<Checkpoint> {
    let cfg = cfg.clone().finalize()?;
    let FitRun { mut params, ctx } = FitRun::init(dataset, &cfg)?;
    let sampler = TripleSampler::new(dataset.items_by_user(Split::Train), dataset.items())?;
    let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|t| t.shape()).collect();
    let mut adam = Adam::new(cfg.lr, &shapes);
    let mut rng = seeded_stream(cfg.seed, STREAM_SAMPLER);

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut stale = 0usize;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        let stats = train_epoch(
            &mut params,
            &mut adam,
            &ctx,
            &cfg,
            &sampler,
            dataset.train.len(),
            &mut rng,
        )?;
        epochs_run = epoch;
        if epoch % cfg.eval_every != 0 && epoch != cfg.epochs {
            continue;
        }
        let report = evaluate_split(
            &params,
            &ctx,
            &cfg,
            dataset,
            Split::Validation,
            &[20],
            cfg.cold_threshold,
        )?;
        let recall = report.recall_at(20).unwrap_or(0.0);
        let record = EvalRecord {
            epoch,
            loss_bpr: stats.loss_bpr,
            loss_cl: stats.loss_cl,
            val_recall20: recall,
        };
        on_eval(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(_, r, _)| recall > *r) {
            best = Some((epoch, recall, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_recall, best_params) = match best {
        Some(b) => b,
        None => {
            // Zero epochs requested: the untrained model is the best we have.
            let report = evaluate_split(
                &params,
                &ctx,
                &cfg,
                dataset,
                Split::Validation,
                &[20],
                cfg.cold_threshold,
            )?;
            (0, report.recall_at(20).unwrap_or(0.0), params)
        }
    };
    Ok(Checkpoint {
        params: best_params,
        svd: ctx.svd.clone(),
        meta: CheckpointMeta {
            seed: cfg.seed,
            fingerprint: dataset.fingerprint(),
            users: dataset.users(),
            items: dataset.items(),
            best_epoch,
            best_val_recall20: best_recall,
            epochs_run,
            history,
            config: cfg,
        },
    })
}

/// Rebuilds the evaluation context of a checkpoint against `dataset`.
pub fn checkpoint_context(ckpt: &Checkpoint, dataset: &Dataset, allow_mismatch: bool) -> Result<ModelContext> {
    let fingerprint = dataset.fingerprint();
    if fingerprint != ckpt.meta.fingerprint && !allow_mismatch {
        return Err(Error::FingerprintMismatch {
            checkpoint: ckpt.meta.fingerprint.clone(),
            data: fingerprint,
        });
    }
    if dataset.users() != ckpt.params.users.rows() || dataset.items() != ckpt.params.items.rows() {
        return Err(Error::InvalidInput(format!(
            "checkpoint has {}x{} users/items, dataset {}x{}",
            ckpt.params.users.rows(),
            ckpt.params.items.rows(),
            dataset.users(),
            dataset.items()
        )));
    }
    ModelContext::with_svd(dataset, ckpt.svd.clone())
}

/// Evaluates a saved checkpoint on `split`.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    split: Split,
    ks: &[usize],
    cold_threshold: usize,
) -> Result<MetricsReport> {
    let ctx = checkpoint_context(ckpt, dataset, false)?;
    evaluate_split(
        &ckpt.params,
        &ctx,
        &ckpt.meta.config,
        dataset,
        split,
        ks,
        cold_threshold,
    )
}

/// Top-`k` unseen items for a dense user index, as `(item index, score)`.
pub fn recommend(ckpt: &Checkpoint, dataset: &Dataset, user: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    if user >= dataset.users() {
        return Err(Error::IndexOutOfRange {
            op: "recommend",
            index: user,
            len: dataset.users(),
        });
    }
    let ctx = checkpoint_context(ckpt, dataset, false)?;
    let (users, items) = final_embeddings(&ckpt.params, &ctx, &ckpt.meta.config)?;
    let row = users.row(user);
    let scores: Vec<f64> = (0..items.rows()).map(|j| dot(row, items.row(j))).collect();
    let exclude = &dataset.items_by_user(Split::Train)[user];
    Ok(rank_topk(&scores, exclude, k)
        .into_iter()
        .map(|j| (j, scores[j]))
        .collect())
}

/// Per-user gate weights and aligned-coordinate counts as TSV. Only defined
/// for models with the alignment stage.
pub fn gate_report(ckpt: &Checkpoint, dataset: &Dataset) -> Result<String> {
    let cfg = &ckpt.meta.config;
    if ckpt.params.alignment.is_none() {
        return Err(Error::InvalidInput(format!(
            "model {} ablation {} has no gating stage",
            cfg.model, cfg.ablation
        )));
    }
    let ctx = checkpoint_context(ckpt, dataset, false)?;
    let mut tape = Tape::new();
    let nodes = ckpt.params.register(&mut tape);
    let pass = forward(
        &mut tape,
        nodes,
        &ctx,
        cfg,
        None,
        ForwardOptions { reconstructed: false },
    )?;
    let (Some(gates), Some(wb), Some(ws)) = (pass.gates, pass.behavior_weights, pass.social_weights) else {
        return Err(Error::InvalidInput("forward pass produced no gates".into()));
    };
    let mask_b = threshold_mask(tape.value(wb), cfg.gamma_behavior());
    let mask_s = threshold_mask(tape.value(ws), cfg.gamma_social());
    let gates = tape.value(gates);
    let mut out = String::from(
        "user\tg_behavior\tg_behavior_aligned\tg_behavior_specific\tg_social\tg_social_aligned\tg_social_specific\taligned_behavior\taligned_social\n",
    );
    for u in 0..dataset.users() {
        out.push_str(&dataset.user_ids[u].to_string());
        for &g in gates.row(u) {
            out.push_str(&format!("\t{g:.6}"));
        }
        let count = |m: &DenseMatrix| m.row(u).iter().filter(|&&x| x > 0.0).count();
        out.push_str(&format!("\t{}\t{}\n", count(&mask_b), count(&mask_s)));
    }
    Ok(out)
}
