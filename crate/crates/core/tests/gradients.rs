mod common;

use std::sync::Arc;

use clsrec::autodiff::{grad_check, NodeId, SparseOperator, Tape};
use clsrec::config::{Ablation, ModelKind, RunConfig};
use clsrec::data::Dataset;
use clsrec::linalg::DenseMatrix;
use clsrec::model::{ModelContext, ModelParams, ParamNodes};
use clsrec::sparse::SparseMatrix;
use clsrec::train::{build_step_loss, Triple};
use clsrec::Result;
use common::{random_dense, rng};

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

/// Random-weighted sum so every output entry carries a distinct adjoint.
fn weighted(t: &mut Tape, node: NodeId, seed: u64) -> Result<NodeId> {
    let (r, c) = t.value(node).shape();
    let w = t.constant(random_dense(r, c, &mut rng(seed ^ 0xabcd)));
    let prod = t.mul(node, w)?;
    t.sum_all(prod)
}

fn check_unary(seed: u64, rows: usize, cols: usize, op: impl Fn(&mut Tape, NodeId) -> Result<NodeId>) -> f64 {
    let x = random_dense(rows, cols, &mut rng(seed));
    grad_check(
        |t, p| {
            let y = op(t, p[0])?;
            weighted(t, y, seed)
        },
        &[x],
        EPS,
    )
    .unwrap()
}

fn check_binary(
    seed: u64,
    a: (usize, usize),
    b: (usize, usize),
    op: impl Fn(&mut Tape, NodeId, NodeId) -> Result<NodeId>,
) -> f64 {
    let mut r = rng(seed);
    let x = random_dense(a.0, a.1, &mut r);
    let y = random_dense(b.0, b.1, &mut r);
    grad_check(
        |t, p| {
            let z = op(t, p[0], p[1])?;
            weighted(t, z, seed)
        },
        &[x, y],
        EPS,
    )
    .unwrap()
}

fn assert_all_seeds(name: &str, f: impl Fn(u64) -> f64) {
    for seed in 0..10 {
        let err = f(seed);
        assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

#[test]
fn matmul_and_transpose() {
    assert_all_seeds("matmul", |s| check_binary(s, (3, 4), (4, 2), |t, a, b| t.matmul(a, b)));
    assert_all_seeds("transpose", |s| check_unary(s, 3, 5, |t, a| t.transpose(a)));
}

#[test]
fn elementwise_binary() {
    assert_all_seeds("add", |s| check_binary(s, (3, 4), (3, 4), |t, a, b| t.add(a, b)));
    assert_all_seeds("sub", |s| check_binary(s, (3, 4), (3, 4), |t, a, b| t.sub(a, b)));
    assert_all_seeds("mul", |s| check_binary(s, (3, 4), (3, 4), |t, a, b| t.mul(a, b)));
}

#[test]
fn elementwise_unary() {
    assert_all_seeds("scale", |s| check_unary(s, 2, 3, |t, a| t.scale(a, -1.7)));
    assert_all_seeds("tanh", |s| check_unary(s, 3, 3, |t, a| t.tanh(a)));
    assert_all_seeds("exp", |s| check_unary(s, 3, 3, |t, a| t.exp(a)));
    assert_all_seeds("log_sigmoid", |s| check_unary(s, 3, 3, |t, a| t.log_sigmoid(a)));
    assert_all_seeds("ln", |s| {
        let x = random_dense(3, 3, &mut rng(s)).map(|v| v.abs() + 0.5);
        grad_check(
            |t, p| {
                let y = t.ln(p[0])?;
                weighted(t, y, s)
            },
            &[x],
            EPS,
        )
        .unwrap()
    });
}

#[test]
fn row_reductions() {
    assert_all_seeds("row_softmax", |s| check_unary(s, 3, 5, |t, a| t.row_softmax(a)));
    assert_all_seeds("row_log_softmax", |s| check_unary(s, 3, 5, |t, a| t.row_log_softmax(a)));
    assert_all_seeds("row_sum", |s| check_unary(s, 4, 3, |t, a| t.row_sum(a)));
    assert_all_seeds("row_cosine", |s| {
        check_binary(s, (3, 4), (5, 4), |t, a, b| t.row_cosine(a, b))
    });
}

#[test]
fn scalar_reductions() {
    for seed in 0..10 {
        let x = random_dense(3, 4, &mut rng(seed));
        for (name, err) in [
            (
                "sum_all",
                grad_check(|t, p| t.sum_all(p[0]), std::slice::from_ref(&x), EPS),
            ),
            (
                "mean_all",
                grad_check(|t, p| t.mean_all(p[0]), std::slice::from_ref(&x), EPS),
            ),
            (
                "l2_norm_sq",
                grad_check(|t, p| t.l2_norm_sq(p[0]), std::slice::from_ref(&x), EPS),
            ),
        ] {
            let err = err.unwrap();
            assert!(err < TOL, "{name} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn indexing_and_masking() {
    assert_all_seeds("gather_rows", |s| {
        check_unary(s, 4, 3, |t, a| t.gather_rows(a, vec![2, 0, 2, 3]))
    });
    assert_all_seeds("column", |s| check_unary(s, 4, 3, |t, a| t.column(a, 1)));
    assert_all_seeds("mask_mul", |s| {
        let mask = random_dense(3, 4, &mut rng(s + 100)).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        check_unary(s, 3, 4, move |t, a| t.mask_mul(a, mask.clone()))
    });
}

#[test]
fn broadcasts() {
    assert_all_seeds("add_row_broadcast", |s| {
        check_binary(s, (4, 3), (1, 3), |t, a, b| t.add_row_broadcast(a, b))
    });
    assert_all_seeds("mul_col_broadcast", |s| {
        check_binary(s, (4, 3), (4, 1), |t, a, b| t.mul_col_broadcast(a, b))
    });
}

#[test]
fn sparse_matmul() {
    assert_all_seeds("sparse_matmul", |s| {
        let mut r = rng(s + 7);
        let pattern = common::random_bipartite(5, 4, 0.4, &mut r);
        let triplets: Vec<_> = pattern
            .iter()
            .map(|&(a, b)| (a, b, 0.3 + (a + b) as f64 * 0.1))
            .collect();
        let op = Arc::new(SparseOperator::new(
            SparseMatrix::from_triplets(5, 4, &triplets).unwrap(),
        ));
        check_unary(s, 4, 3, move |t, a| t.sparse_matmul(&op, a))
    });
}

fn config(model: ModelKind, ablation: Ablation, tweak: impl Fn(&mut RunConfig)) -> RunConfig {
    let mut cfg = RunConfig::new(model);
    cfg.ablation = ablation;
    cfg.dim = 4;
    cfg.layers = 2;
    cfg.svd_rank = 2;
    cfg.svd_oversampling = 2;
    cfg.gate_hidden = 3;
    cfg.init_std = 0.5;
    cfg.lambda = 1e-2;
    cfg.alpha = 0.3;
    tweak(&mut cfg);
    cfg.finalize().unwrap()
}

fn triples(dataset: &Dataset, seed: u64) -> Vec<Triple> {
    use rand::Rng;
    let by_user = dataset.items_by_user(clsrec::Split::Train);
    let mut r = rng(seed);
    (0..6)
        .map(|_| {
            let user = r.random_range(0..dataset.users());
            let pos = &by_user[user];
            let positive = pos[r.random_range(0..pos.len())];
            let negative = (0..dataset.items()).find(|j| !pos.contains(j)).unwrap();
            Triple {
                user,
                positive,
                negative,
            }
        })
        .collect()
}

fn loss_error(dataset: &Dataset, cfg: &RunConfig, seed: u64) -> f64 {
    let params = ModelParams::init(cfg, dataset.users(), dataset.items(), &mut rng(seed));
    let ctx = ModelContext::build(dataset, cfg, &mut rng(seed + 1)).unwrap();
    let batch = triples(dataset, seed + 2);
    let tensors: Vec<DenseMatrix> = params.tensors().into_iter().cloned().collect();
    grad_check(
        |t, ids| Ok(build_step_loss(t, ParamNodes::from_ids(ids)?, &ctx, cfg, &batch)?.total),
        &tensors,
        EPS,
    )
    .unwrap()
}

#[test]
fn full_clsrec_loss_on_toy_graph() {
    let data = common::toy_dataset();
    for (label, cfg) in [
        ("default", config(ModelKind::ClsRec, Ablation::None, |_| {})),
        (
            "full batch cl",
            config(ModelKind::ClsRec, Ablation::None, |c| c.cl_full_batch = true),
        ),
        (
            "batch reg",
            config(ModelKind::ClsRec, Ablation::None, |c| c.reg_batch_rows = true),
        ),
        (
            "raw svd",
            config(ModelKind::ClsRec, Ablation::None, |c| c.svd_on_raw = true),
        ),
    ] {
        for seed in 0..3 {
            let err = loss_error(&data, &cfg, seed);
            assert!(err < TOL, "{label} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn full_clsrec_loss_on_tiny_graph() {
    let data = common::tiny_dataset();
    let cfg = config(ModelKind::ClsRec, Ablation::None, |_| {});
    for seed in 0..3 {
        let err = loss_error(&data, &cfg, seed);
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn baseline_and_ablation_losses() {
    let data = common::toy_dataset();
    for cfg in [
        config(ModelKind::Bpr, Ablation::None, |_| {}),
        config(ModelKind::LightGcn, Ablation::None, |_| {}),
        config(ModelKind::ClsRec, Ablation::NoCl, |_| {}),
        config(ModelKind::ClsRec, Ablation::NoClIia, |_| {}),
    ] {
        let err = loss_error(&data, &cfg, 4);
        assert!(err < TOL, "{} {}: {err:e}", cfg.model, cfg.ablation);
    }
}
