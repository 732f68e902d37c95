mod common;

use std::sync::Arc;

use clsrec::autodiff::{SparseOperator, Tape};
use clsrec::graph::{normalize_bipartite, normalize_social, propagate_interaction, propagate_social};
use clsrec::linalg::{dot, DenseMatrix};
use clsrec::metrics::{cold_users, evaluate_rankings};
use clsrec::sparse::SparseMatrix;
use clsrec::svd::{propagate_reconstructed, truncated_svd, SvdConfig, SvdFactors};
use common::{
    brute_force_metrics, dense_normalized, layer_mean, random_bipartite, random_dense, random_edges, rng,
    symmetric_pairs,
};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

#[test]
fn interaction_propagation_matches_dense() {
    for case in 0..20u64 {
        let mut r = rng(case);
        let (m, n, d) = (r.random_range(2..=10), r.random_range(2..=10), r.random_range(1..=5));
        let layers = (case % 4) as usize;
        let a = SparseMatrix::from_pairs(m, n, &random_bipartite(m, n, 0.35, &mut r)).unwrap();
        let eu = random_dense(m, d, &mut r);
        let ev = random_dense(n, d, &mut r);

        let (norm, norm_t) = normalize_bipartite(&a).unwrap();
        let dense_norm = dense_normalized(&a.to_dense());
        assert!(
            norm.to_dense().max_abs_diff(&dense_norm) <= 1e-12,
            "case {case}: normalization"
        );

        let mut tape = Tape::new();
        let u0 = tape.constant(eu.clone());
        let v0 = tape.constant(ev.clone());
        let (u, v) = propagate_interaction(
            &mut tape,
            &Arc::new(SparseOperator::new(norm)),
            &Arc::new(SparseOperator::new(norm_t)),
            u0,
            v0,
            layers,
        )
        .unwrap();

        let dense_t = dense_norm.transpose();
        let (mut us, mut vs) = (vec![eu], vec![ev]);
        for _ in 0..layers {
            let nu = dense_norm.matmul(vs.last().unwrap()).unwrap();
            let nv = dense_t.matmul(us.last().unwrap()).unwrap();
            us.push(nu);
            vs.push(nv);
        }
        assert!(
            tape.value(u).max_abs_diff(&layer_mean(&us)) <= 1e-10,
            "case {case}: users"
        );
        assert!(
            tape.value(v).max_abs_diff(&layer_mean(&vs)) <= 1e-10,
            "case {case}: items"
        );
    }
}

#[test]
fn social_propagation_matches_dense() {
    for case in 0..20u64 {
        let mut r = rng(100 + case);
        let (m, d) = (r.random_range(2..=10), r.random_range(1..=5));
        let layers = 1 + (case % 3) as usize;
        let s = SparseMatrix::from_pairs(m, m, &symmetric_pairs(&random_edges(m, 0.4, &mut r))).unwrap();
        let e = random_dense(m, d, &mut r);
        let norm = normalize_social(&s).unwrap();
        assert!(norm.is_symmetric());
        let dense_norm = dense_normalized(&s.to_dense());
        assert!(norm.to_dense().max_abs_diff(&dense_norm) <= 1e-12);

        let mut tape = Tape::new();
        let e0 = tape.constant(e.clone());
        let out = propagate_social(&mut tape, &Arc::new(SparseOperator::new(norm)), e0, layers).unwrap();
        let mut ls = vec![e];
        for _ in 0..layers {
            ls.push(dense_norm.matmul(ls.last().unwrap()).unwrap());
        }
        assert!(tape.value(out).max_abs_diff(&layer_mean(&ls)) <= 1e-10, "case {case}");
    }
}

#[test]
fn propagation_is_linear() {
    let mut r = rng(9);
    let a = SparseMatrix::from_pairs(6, 7, &random_bipartite(6, 7, 0.4, &mut r)).unwrap();
    let (norm, norm_t) = normalize_bipartite(&a).unwrap();
    let (norm, norm_t) = (
        Arc::new(SparseOperator::new(norm)),
        Arc::new(SparseOperator::new(norm_t)),
    );
    let run = |eu: &DenseMatrix, ev: &DenseMatrix| {
        let mut tape = Tape::new();
        let u0 = tape.constant(eu.clone());
        let v0 = tape.constant(ev.clone());
        let (u, v) = propagate_interaction(&mut tape, &norm, &norm_t, u0, v0, 3).unwrap();
        (tape.value(u).clone(), tape.value(v).clone())
    };
    let (x_u, x_v) = (random_dense(6, 3, &mut r), random_dense(7, 3, &mut r));
    let (y_u, y_v) = (random_dense(6, 3, &mut r), random_dense(7, 3, &mut r));
    let (a_c, b_c) = (1.3, -0.4);
    let combo_u = x_u.scale(a_c).add(&y_u.scale(b_c)).unwrap();
    let combo_v = x_v.scale(a_c).add(&y_v.scale(b_c)).unwrap();
    let (cu, cv) = run(&combo_u, &combo_v);
    let ((xu, xv), (yu, yv)) = (run(&x_u, &x_v), run(&y_u, &y_v));
    assert!(cu.max_abs_diff(&xu.scale(a_c).add(&yu.scale(b_c)).unwrap()) < 1e-12);
    assert!(cv.max_abs_diff(&xv.scale(a_c).add(&yv.scale(b_c)).unwrap()) < 1e-12);
}

fn random_factors(m: usize, k: usize, r: &mut rand_chacha::ChaCha8Rng) -> SvdFactors {
    let q = DMatrix::from_fn(m, k, |_, _| r.random_range(-1.0..1.0)).qr().q();
    let u = DenseMatrix::from_vec(m, k, (0..m * k).map(|i| q[(i / k, i % k)]).collect()).unwrap();
    let mut singular_values: Vec<f64> = (0..k).map(|_| r.random_range(0.1..2.0)).collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    SvdFactors {
        u,
        singular_values,
        v: random_dense(4, k, r),
    }
}

#[test]
fn factored_reconstructed_view_matches_dense() {
    for case in 0..10u64 {
        let mut r = rng(200 + case);
        let factors = random_factors(6, 2, &mut r);
        let mut us = factors.u.clone();
        for row in 0..6 {
            for c in 0..2 {
                us.set(row, c, us.get(row, c) * factors.singular_values[c]);
            }
        }
        let affinity = us.matmul_t(&factors.u).unwrap();
        let e = random_dense(6, 3, &mut r);
        let layers = 1 + (case % 3) as usize;

        let mut tape = Tape::new();
        let e0 = tape.constant(e.clone());
        let out = propagate_reconstructed(&mut tape, &factors, e0, layers).unwrap();
        let mut ls = vec![e.clone()];
        for _ in 0..layers {
            ls.push(affinity.matmul(ls.last().unwrap()).unwrap());
        }
        assert!(tape.value(out).max_abs_diff(&layer_mean(&ls)) <= 1e-10, "case {case}");
        assert!(
            factors
                .affinity_apply(&e)
                .unwrap()
                .max_abs_diff(&affinity.matmul(&e).unwrap())
                <= 1e-10
        );
    }
}

#[test]
fn reconstructed_affinity_is_symmetric() {
    for case in 0..10u64 {
        let mut r = rng(300 + case);
        let factors = random_factors(6, 2, &mut r);
        let x = random_dense(6, 1, &mut r);
        let y = random_dense(6, 1, &mut r);
        let ax = factors.affinity_apply(&x).unwrap();
        let ay = factors.affinity_apply(&y).unwrap();
        assert!((dot(ax.values(), y.values()) - dot(x.values(), ay.values())).abs() < 1e-12);
    }
}

/// `min ‖A − B‖_F` over rank-k B, from the eigenvalues of AᵀA.
fn best_rank_k_error(a: &DenseMatrix, k: usize) -> f64 {
    let m = DMatrix::from_row_slice(a.rows(), a.cols(), a.values());
    let gram = m.transpose() * &m;
    let mut eig: Vec<f64> = SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig[k..].iter().sum::<f64>().sqrt()
}

fn sparse_random(rows: usize, cols: usize, seed: u64) -> SparseMatrix {
    let mut r = rng(seed);
    SparseMatrix::from_pairs(rows, cols, &random_bipartite(rows, cols, 0.25, &mut r)).unwrap()
}

#[test]
fn randomized_svd_near_optimal() {
    for case in 0..5u64 {
        let a = sparse_random(20, 30, 400 + case);
        let dense = a.to_dense();
        for k in 1..=5 {
            let f = truncated_svd(
                &a,
                SvdConfig {
                    rank: k,
                    ..SvdConfig::default()
                },
                &mut rng(case),
            )
            .unwrap();
            let err = dense.sub(&f.reconstruct()).unwrap().frobenius();
            let best = best_rank_k_error(&dense, k);
            assert!(err <= 1.05 * best + 1e-9, "case {case} k {k}: {err} vs optimum {best}");
        }
    }
}

#[test]
fn reconstruction_error_non_increasing_in_rank() {
    let a = sparse_random(20, 30, 17);
    let dense = a.to_dense();
    let errors: Vec<f64> = (1..=5)
        .map(|k| {
            let f = truncated_svd(
                &a,
                SvdConfig {
                    rank: k,
                    ..SvdConfig::default()
                },
                &mut rng(3),
            )
            .unwrap();
            dense.sub(&f.reconstruct()).unwrap().frobenius()
        })
        .collect();
    for w in errors.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{errors:?}");
    }
}

#[test]
fn svd_factors_are_orthonormal_and_sorted() {
    let a = sparse_random(25, 18, 5);
    let f = truncated_svd(&a, SvdConfig::default(), &mut rng(1)).unwrap();
    for m in [&f.u, &f.v] {
        let gram = m.t_matmul(m).unwrap();
        assert!(gram.max_abs_diff(&DenseMatrix::identity(f.rank())) < 1e-10);
    }
    assert!(f.singular_values.windows(2).all(|w| w[0] >= w[1]));
    for c in 0..f.rank() {
        let col: Vec<f64> = (0..f.u.rows()).map(|r| f.u.get(r, c)).collect();
        let peak = col.iter().copied().max_by(|x, y| x.abs().total_cmp(&y.abs())).unwrap();
        assert!(peak > 0.0);
    }
}

#[test]
fn diag_singular_values_recovered() {
    let a = SparseMatrix::from_triplets(2, 2, &[(0, 0, 3.0), (1, 1, 1.0)]).unwrap();
    let f = truncated_svd(
        &a,
        SvdConfig {
            rank: 2,
            ..SvdConfig::default()
        },
        &mut rng(0),
    )
    .unwrap();
    assert!((f.singular_values[0] - 3.0).abs() < 1e-8);
    assert!((f.singular_values[1] - 1.0).abs() < 1e-8);
}

#[test]
fn blockwise_scoring_matches_per_pair() {
    for case in 0..10u64 {
        let mut r = rng(500 + case);
        let (m, n) = (r.random_range(3..=10), r.random_range(6..=14));
        let users = random_dense(m, 4, &mut r);
        let items = random_dense(n, 4, &mut r);
        let mut truth = vec![Vec::new(); m];
        let mut exclude = vec![Vec::new(); m];
        for u in 0..m {
            for j in 0..n {
                match r.random_range(0..5) {
                    0 => truth[u].push(j),
                    1 => exclude[u].push(j),
                    _ => {}
                }
            }
        }
        let degrees: Vec<usize> = exclude.iter().map(Vec::len).collect();
        let cold = cold_users(&degrees, 3);
        let ks = [1, 3, 5];
        let report = evaluate_rankings(&users, &items, &truth, &exclude, &cold, &ks, 3).unwrap();
        if truth.iter().all(Vec::is_empty) {
            continue;
        }
        for (j, &k) in ks.iter().enumerate() {
            let (p, rc, nd) = brute_force_metrics(&users, &items, &truth, &exclude, k);
            assert!((report.all.precision[j] - p).abs() < 1e-10, "case {case} k {k}");
            assert!((report.all.recall[j] - rc).abs() < 1e-10, "case {case} k {k}");
            assert!((report.all.ndcg[j] - nd).abs() < 1e-10, "case {case} k {k}");
        }
    }
}

#[test]
fn blockwise_scoring_spans_several_blocks() {
    let mut r = rng(77);
    let (m, n) = (600, 30);
    let users = random_dense(m, 3, &mut r);
    let items = random_dense(n, 3, &mut r);
    let truth: Vec<Vec<usize>> = (0..m)
        .map(|u| {
            let mut v = vec![u % n, (u * 7 + 3) % n];
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();
    let exclude: Vec<Vec<usize>> = (0..m)
        .map(|u| [(u + 11) % n].into_iter().filter(|j| !truth[u].contains(j)).collect())
        .collect();
    let cold = vec![false; m];
    let report = evaluate_rankings(&users, &items, &truth, &exclude, &cold, &[10], 20).unwrap();
    let (p, rc, nd) = brute_force_metrics(&users, &items, &truth, &exclude, 10);
    assert!((report.all.precision[0] - p).abs() < 1e-10);
    assert!((report.all.recall[0] - rc).abs() < 1e-10);
    assert!((report.all.ndcg[0] - nd).abs() < 1e-10);
}
