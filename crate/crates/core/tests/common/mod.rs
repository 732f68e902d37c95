#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use clsrec::data::{Corpus, Dataset};
use clsrec::linalg::{dot, DenseMatrix};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_dense(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let values = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseMatrix::from_vec(rows, cols, values).unwrap()
}

/// Random binary `rows × cols` pattern with every row and column touched.
pub fn random_bipartite(rows: usize, cols: usize, density: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if rng.random_bool(density) {
                pairs.push((r, c));
            }
        }
    }
    pairs.push((0, cols - 1));
    pairs.push((rows - 1, 0));
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// Random undirected edges `(a, b)` with `a < b`.
pub fn random_edges(n: usize, density: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(density) {
                edges.push((a, b));
            }
        }
    }
    edges
}

pub fn symmetric_pairs(edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut out: Vec<_> = edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
    out.sort_unstable();
    out
}

/// Six users, eight items, four friendships; every user has training items.
pub fn toy_dataset() -> Dataset {
    Dataset {
        name: "toy".into(),
        seed: 0,
        user_ids: (10..16).collect(),
        item_ids: (100..108).collect(),
        train: vec![
            (0, 0),
            (0, 1),
            (0, 2),
            (1, 1),
            (1, 3),
            (2, 2),
            (2, 4),
            (2, 5),
            (3, 5),
            (3, 6),
            (4, 0),
            (4, 7),
            (5, 3),
            (5, 6),
            (5, 7),
        ],
        validation: vec![(0, 3), (2, 6)],
        test: vec![(1, 4), (3, 7), (4, 1)],
        social: vec![(0, 1), (1, 2), (3, 4), (2, 5)],
    }
}

/// Four users, five items, a friendship triangle plus an isolated user.
pub fn tiny_dataset() -> Dataset {
    Dataset {
        name: "tiny".into(),
        seed: 0,
        user_ids: vec![1, 2, 3, 4],
        item_ids: vec![1, 2, 3, 4, 5],
        train: vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (3, 4), (3, 0)],
        validation: vec![],
        test: vec![(2, 0)],
        social: vec![(0, 1), (0, 2), (1, 2)],
    }
}

/// Community-structured synthetic data: users in the same community share
/// item tastes and are more likely to be friends.
pub fn synthetic_corpus(users: usize, items: usize, per_user: usize, communities: usize, seed: u64) -> Corpus {
    let mut rng = rng(seed);
    let block = items / communities;
    let mut interactions = Vec::new();
    for u in 0..users {
        let c = u % communities;
        for _ in 0..per_user {
            let item = if rng.random_bool(0.8) {
                c * block + rng.random_range(0..block)
            } else {
                rng.random_range(0..items)
            };
            interactions.push((u as u64 + 1, item as u64 + 1000));
        }
    }
    let mut friends = Vec::new();
    for u in 0..users {
        for _ in 0..3 {
            let v = if rng.random_bool(0.7) {
                (rng.random_range(0..users / communities) * communities + u % communities).min(users - 1)
            } else {
                rng.random_range(0..users)
            };
            friends.push((u as u64 + 1, v as u64 + 1));
        }
    }
    Corpus::from_raw("synthetic", &interactions, &friends).unwrap()
}

/// Writes interactions and directed friendship rows in the LastFM dump layout.
pub fn write_lastfm(dir: &Path, interactions: &[(u64, u64)], friends: &[(u64, u64)]) {
    let mut ua = String::from("userID\tartistID\tweight\n");
    for (u, a) in interactions {
        writeln!(ua, "{u}\t{a}\t{}", 10 + u % 7).unwrap();
    }
    fs::write(dir.join("user_artists.dat"), ua).unwrap();
    let mut uf = String::from("userID\tfriendID\n");
    for (a, b) in friends {
        writeln!(uf, "{a}\t{b}").unwrap();
    }
    fs::write(dir.join("user_friends.dat"), uf).unwrap();
}

pub fn write_synthetic_lastfm(dir: &Path, users: u64, items: u64, seed: u64) {
    let mut rng = rng(seed);
    let mut interactions = Vec::new();
    for u in 1..=users {
        for _ in 0..6 {
            let base = (u % 3) * items / 3;
            interactions.push((u, 500 + base + rng.random_range(0..items / 3)));
        }
    }
    let mut friends = Vec::new();
    for u in 1..=users {
        let v = (u + 2) % users + 1;
        friends.push((u, v));
        friends.push((v, u));
    }
    write_lastfm(dir, &interactions, &friends);
}

/// `D_r^{-1/2} P D_c^{-1/2}` of a binary pattern, entry by entry.
pub fn dense_normalized(pattern: &DenseMatrix) -> DenseMatrix {
    let row_deg: Vec<f64> = (0..pattern.rows()).map(|r| pattern.row(r).iter().sum()).collect();
    let col_deg: Vec<f64> = (0..pattern.cols())
        .map(|c| (0..pattern.rows()).map(|r| pattern.get(r, c)).sum())
        .collect();
    let mut out = DenseMatrix::zeros(pattern.rows(), pattern.cols());
    for (r, &dr) in row_deg.iter().enumerate() {
        for (c, &dc) in col_deg.iter().enumerate() {
            if pattern.get(r, c) != 0.0 {
                out.set(r, c, 1.0 / (dr * dc).sqrt());
            }
        }
    }
    out
}

pub fn layer_mean(layers: &[DenseMatrix]) -> DenseMatrix {
    let mut acc = DenseMatrix::zeros(layers[0].rows(), layers[0].cols());
    for l in layers {
        acc = acc.add(l).unwrap();
    }
    acc.scale(1.0 / layers.len() as f64)
}

/// Per-pair scoring, full sort by (score desc, id asc), hand-rolled metrics.
pub fn brute_force_metrics(
    users: &DenseMatrix,
    items: &DenseMatrix,
    truth: &[Vec<usize>],
    exclude: &[Vec<usize>],
    k: usize,
) -> (f64, f64, f64) {
    let (mut p, mut rc, mut nd, mut n) = (0.0, 0.0, 0.0, 0usize);
    for u in 0..users.rows() {
        if truth[u].is_empty() {
            continue;
        }
        let mut cands: Vec<(f64, usize)> = (0..items.rows())
            .filter(|j| !exclude[u].contains(j))
            .map(|j| (dot(users.row(u), items.row(j)), j))
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top: Vec<usize> = cands.iter().take(k).map(|c| c.1).collect();
        let hits: Vec<bool> = top.iter().map(|j| truth[u].contains(j)).collect();
        let h = hits.iter().filter(|&&x| x).count() as f64;
        let dcg: f64 = hits
            .iter()
            .enumerate()
            .filter(|(_, &x)| x)
            .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
            .sum();
        let idcg: f64 = (0..k.min(truth[u].len())).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
        p += h / k as f64;
        rc += h / truth[u].len() as f64;
        nd += dcg / idcg;
        n += 1;
    }
    let n = n as f64;
    (p / n, rc / n, nd / n)
}
