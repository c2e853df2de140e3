//! Isolation forest anomaly scores.

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::stream_rng;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Average path length of an unsuccessful binary-search-tree lookup among
/// `n` points.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let m = (n - 1) as f64;
            2.0 * (m.ln() + EULER_GAMMA) - 2.0 * m / n as f64
        }
    }
}

enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn grow(rows: &[Vec<f64>], sample_idx: Vec<usize>, height_limit: usize, rng: &mut crate::rng::Rng) -> Self {
        let mut tree = Tree { nodes: Vec::new() };
        tree.build(rows, sample_idx, 0, height_limit, rng);
        tree
    }

    fn build(
        &mut self,
        rows: &[Vec<f64>],
        idx: Vec<usize>,
        depth: usize,
        height_limit: usize,
        rng: &mut crate::rng::Rng,
    ) -> usize {
        let id = self.nodes.len();
        if depth >= height_limit || idx.len() <= 1 {
            self.nodes.push(Node::Leaf { size: idx.len() });
            return id;
        }
        let m = rows[idx[0]].len();
        // features that still have spread in this node
        let mut ranges = Vec::with_capacity(m);
        for f in 0..m {
            let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                (lo.min(rows[i][f]), hi.max(rows[i][f]))
            });
            if hi > lo {
                ranges.push((f, lo, hi));
            }
        }
        if ranges.is_empty() {
            self.nodes.push(Node::Leaf { size: idx.len() });
            return id;
        }
        let (feature, lo, hi) = ranges[rng.gen_range(0..ranges.len())];
        let mut threshold = rng.gen_range(lo..hi);
        if threshold <= lo {
            threshold = 0.5 * (lo + hi);
        }
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| rows[i][feature] < threshold);
        self.nodes.push(Node::Leaf { size: 0 });
        let left = self.build(rows, l, depth + 1, height_limit, rng);
        let right = self.build(rows, r, depth + 1, height_limit, rng);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[node] {
                Node::Leaf { size } => return depth + average_path_length(size),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[feature] < threshold { left } else { right };
                    depth += 1.0;
                }
            }
        }
    }
}

/// Anomaly scores `2^(-E[h(x)] / c(subsample))` for every row; higher is more
/// anomalous. Constant columns are never chosen as split features, so a fully
/// constant matrix scores every row 0.5.
///
/// Trees are grown in parallel, each from its own derived seed, and path
/// lengths are averaged in tree order, so the output is bitwise reproducible
/// for a fixed `seed` regardless of thread count.
pub fn isolation_forest_scores(rows: &[Vec<f64>], trees: usize, subsample: usize, seed: u64) -> Result<Vec<f64>> {
    let n = rows.len();
    if subsample < 2 || n < subsample {
        return Err(Error::invalid(format!(
            "isolation forest needs n >= subsample >= 2 (n = {n}, subsample = {subsample})"
        )));
    }
    if trees == 0 {
        return Err(Error::invalid("isolation forest needs at least one tree"));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("isolation forest input must be a finite rectangular matrix"));
    }
    let height_limit = (subsample as f64).log2().ceil() as usize;
    let forest: Vec<Tree> = (0..trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, "iforest", t as u64);
            let idx = sample(&mut rng, n, subsample).into_vec();
            Tree::grow(rows, idx, height_limit, &mut rng)
        })
        .collect();
    let norm = average_path_length(subsample);
    Ok(rows
        .par_iter()
        .map(|x| {
            let total: f64 = forest.iter().map(|t| t.path_length(x)).sum();
            let mean = total / trees as f64;
            2f64.powf(-mean / norm)
        })
        .collect())
}

/// Indices of the `count` highest scores (ties resolved by lower index).
pub fn top_scores(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(count);
    order.sort_unstable();
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_cloud(n: usize, dims: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = crate::rng::rng_from(seed);
        (0..n)
            .map(|_| (0..dims).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn normalizer_values() {
        assert_eq!(average_path_length(1), 0.0);
        assert_eq!(average_path_length(2), 1.0);
        // 2 H(255) - 2*255/256 with H(i) ~ ln i + gamma
        let c = average_path_length(256);
        assert!((c - (2.0 * (255f64.ln() + EULER_GAMMA) - 2.0 * 255.0 / 256.0)).abs() < 1e-12);
    }

    #[test]
    fn far_point_scores_highest() {
        let mut rows = gaussian_cloud(500, 3, 11);
        rows[137] = vec![100.0, 100.0, 100.0];
        let scores = isolation_forest_scores(&rows, 100, 256, 5).unwrap();
        // distance-to-centroid oracle picks the same row
        let by_distance = rows
            .iter()
            .enumerate()
            .max_by(|a, b| {
                let da: f64 = a.1.iter().map(|v| v * v).sum();
                let db: f64 = b.1.iter().map(|v| v * v).sum();
                da.total_cmp(&db)
            })
            .unwrap()
            .0;
        let by_score = top_scores(&scores, 1)[0];
        assert_eq!(by_distance, 137);
        assert_eq!(by_score, 137);
        assert!(scores.iter().all(|s| *s > 0.0 && *s < 1.0));
    }

    #[test]
    fn identical_rows_share_one_score() {
        let rows = vec![vec![1.0, 2.0, 3.0]; 300];
        let scores = isolation_forest_scores(&rows, 50, 256, 1).unwrap();
        assert!(scores.iter().all(|&s| s == scores[0]));
        assert!((scores[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fixed_seed_is_bitwise_deterministic() {
        let rows = gaussian_cloud(400, 4, 3);
        let a = isolation_forest_scores(&rows, 64, 128, 99).unwrap();
        let b = isolation_forest_scores(&rows, 64, 128, 99).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = isolation_forest_scores(&rows, 64, 128, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn constant_column_is_tolerated() {
        let mut rows = gaussian_cloud(300, 2, 4);
        for r in rows.iter_mut() {
            r.push(868.0);
        }
        let scores = isolation_forest_scores(&rows, 32, 64, 2).unwrap();
        assert!(scores.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn rejects_small_inputs() {
        let rows = vec![vec![0.0]; 3];
        assert!(isolation_forest_scores(&rows, 10, 4, 0).is_err());
        assert!(isolation_forest_scores(&rows, 10, 1, 0).is_err());
    }
}
