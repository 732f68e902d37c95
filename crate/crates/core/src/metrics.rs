//! Top-K ranking with exclusions, Precision/Recall/NDCG, and the cold-user
//! slice.

use std::cmp::Ordering;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Users scored per dense block during evaluation.
pub const EVAL_BLOCK: usize = 256;

/// Descending score, ties broken by ascending item id.
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Top `k` items by score, skipping `exclude` (sorted ascending). Returns a
/// shorter list when fewer than `k` items remain.
pub fn rank_topk(scores: &[f64], exclude: &[usize], k: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = Vec::with_capacity(scores.len());
    let mut ex = exclude.iter().peekable();
    for item in 0..scores.len() {
        while ex.peek().is_some_and(|&&e| e < item) {
            ex.next();
        }
        if ex.peek() == Some(&&item) {
            continue;
        }
        candidates.push(item);
    }
    if k > candidates.len() {
        warn!(
            "requested top-{k} but only {} items remain after exclusions",
            candidates.len()
        );
    }
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    candidates
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

/// Precision, recall and NDCG of the first `k` entries of `ranked` against a
/// sorted, non-empty `truth`. Precision divides by `k` even when the list is
/// shorter.
pub fn metrics_at_k(ranked: &[usize], truth: &[usize], k: usize) -> RankMetrics {
    debug_assert!(!truth.is_empty());
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in ranked.iter().take(k).enumerate() {
        if truth.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let idcg: f64 = (0..k.min(truth.len())).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum();
    RankMetrics {
        precision: hits as f64 / k as f64,
        recall: hits as f64 / truth.len() as f64,
        ndcg: if idcg > 0.0 { dcg / idcg } else { 0.0 },
    }
}

/// Users with fewer than `threshold` training interactions.
pub fn cold_users(train_degrees: &[usize], threshold: usize) -> Vec<bool> {
    train_degrees.iter().map(|&d| d < threshold).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    /// Users with non-empty ground truth that were averaged.
    pub users: usize,
    /// Users in the slice skipped for having no ground truth.
    pub skipped: usize,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

impl SliceMetrics {
    fn empty(n: usize) -> Self {
        SliceMetrics {
            users: 0,
            skipped: 0,
            precision: vec![0.0; n],
            recall: vec![0.0; n],
            ndcg: vec![0.0; n],
        }
    }

    fn absorb(&mut self, other: &SliceMetrics) {
        self.users += other.users;
        self.skipped += other.skipped;
        for (dst, src) in [
            (&mut self.precision, &other.precision),
            (&mut self.recall, &other.recall),
            (&mut self.ndcg, &other.ndcg),
        ] {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    fn add(&mut self, per_k: &[RankMetrics]) {
        self.users += 1;
        for (j, m) in per_k.iter().enumerate() {
            self.precision[j] += m.precision;
            self.recall[j] += m.recall;
            self.ndcg[j] += m.ndcg;
        }
    }

    fn average(&mut self) {
        if self.users == 0 {
            return;
        }
        let n = self.users as f64;
        for v in [&mut self.precision, &mut self.recall, &mut self.ndcg] {
            v.iter_mut().for_each(|x| *x /= n);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub all: SliceMetrics,
    pub cold: SliceMetrics,
    pub cold_threshold: usize,
}

impl MetricsReport {
    fn index(&self, k: usize) -> Option<usize> {
        self.ks.iter().position(|&x| x == k)
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.index(k).map(|j| self.all.recall[j])
    }

    pub fn precision_at(&self, k: usize) -> Option<f64> {
        self.index(k).map(|j| self.all.precision[j])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.index(k).map(|j| self.all.ndcg[j])
    }

    pub fn cold_precision_at(&self, k: usize) -> Option<f64> {
        self.index(k).map(|j| self.cold.precision[j])
    }

    pub fn cold_recall_at(&self, k: usize) -> Option<f64> {
        self.index(k).map(|j| self.cold.recall[j])
    }

    /// Columns: metric, K, all_users, cold_users.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tK\tall_users\tcold_users\n");
        for (name, all, cold) in [
            ("Precision", &self.all.precision, &self.cold.precision),
            ("Recall", &self.all.recall, &self.cold.recall),
            ("NDCG", &self.all.ndcg, &self.cold.ndcg),
        ] {
            for (j, k) in self.ks.iter().enumerate() {
                out.push_str(&format!("{name}\t{k}\t{:.4}\t{:.4}\n", all[j], cold[j]));
            }
        }
        out
    }
}

/// Scores every user against every item block-wise (`users · itemsᵀ`), ranks
/// with `exclude[u]` removed, and averages metrics over users with non-empty
/// `truth[u]`, overall and for `cold[u]` users.
pub fn evaluate_rankings(
    users: &DenseMatrix,
    items: &DenseMatrix,
    truth: &[Vec<usize>],
    exclude: &[Vec<usize>],
    cold: &[bool],
    ks: &[usize],
    cold_threshold: usize,
) -> Result<MetricsReport> {
    let m = users.rows();
    if truth.len() != m || exclude.len() != m || cold.len() != m {
        return Err(Error::InvalidInput(format!(
            "evaluation inputs disagree on user count: {m} embeddings, {} truth, {} exclusions, {} cold flags",
            truth.len(),
            exclude.len(),
            cold.len()
        )));
    }
    if users.cols() != items.cols() {
        return Err(Error::shape("evaluate", users.shape(), items.shape()));
    }
    if ks.is_empty() {
        return Err(Error::InvalidInput("no cutoffs requested".into()));
    }
    let max_k = *ks.iter().max().unwrap();
    let blocks: Vec<usize> = (0..m).step_by(EVAL_BLOCK).collect();
    let partials: Vec<Result<(SliceMetrics, SliceMetrics)>> = blocks
        .par_iter()
        .map(|&start| {
            let end = (start + EVAL_BLOCK).min(m);
            let rows: Vec<usize> = (start..end).filter(|&u| !truth[u].is_empty()).collect();
            let mut all = SliceMetrics::empty(ks.len());
            let mut cold_slice = SliceMetrics::empty(ks.len());
            for u in start..end {
                if truth[u].is_empty() {
                    all.skipped += 1;
                    if cold[u] {
                        cold_slice.skipped += 1;
                    }
                }
            }
            if rows.is_empty() {
                return Ok((all, cold_slice));
            }
            let scores = users.gather_rows(&rows)?.matmul_t(items)?;
            for (r, &u) in rows.iter().enumerate() {
                let ranked = rank_topk(scores.row(r), &exclude[u], max_k);
                let per_k: Vec<RankMetrics> = ks.iter().map(|&k| metrics_at_k(&ranked, &truth[u], k)).collect();
                all.add(&per_k);
                if cold[u] {
                    cold_slice.add(&per_k);
                }
            }
            Ok((all, cold_slice))
        })
        .collect();

    let mut all = SliceMetrics::empty(ks.len());
    let mut cold_slice = SliceMetrics::empty(ks.len());
    for partial in partials {
        let (a, c) = partial?;
        all.absorb(&a);
        cold_slice.absorb(&c);
    }
    all.average();
    cold_slice.average();
    Ok(MetricsReport {
        ks: ks.to_vec(),
        all,
        cold: cold_slice,
        cold_threshold,
    })
}
