//! Isolation forest used as a one-class membership test for pseudo-domains.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CasaError, Result};

const EULER_GAMMA: f64 = 0.5772156649;

/// Average path length of an unsuccessful BST search over `n` points.
pub fn c_factor(n: usize) -> Result<f64> {
    if n < 2 {
        return Err(CasaError::Domain(format!("c_factor needs n >= 2, got {n}")));
    }
    let n = n as f64;
    let harmonic = (n - 1.0).ln() + EULER_GAMMA;
    Ok(2.0 * harmonic - 2.0 * (n - 1.0) / n)
}

fn external_correction(size: usize) -> f64 {
    c_factor(size).unwrap_or(0.0)
}

/// Converts a mean path length into the `2^(-E[h]/c(psi))` anomaly score.
pub fn score_from_path_length(mean_path: f64, sample_size: usize) -> f64 {
    let c = external_correction(sample_size);
    if c <= 0.0 {
        return 0.5;
    }
    2f64.powf(-mean_path / c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    External {
        size: usize,
    },
}

/// A single isolation tree stored as a node arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ITree {
    nodes: Vec<Node>,
    height_limit: usize,
}

impl ITree {
    fn build(points: &[&[f64]], height_limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = ITree {
            nodes: Vec::new(),
            height_limit,
        };
        let idx: Vec<usize> = (0..points.len()).collect();
        tree.grow(points, idx, 0, rng);
        tree
    }

    fn grow(&mut self, points: &[&[f64]], idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let slot = self.nodes.len();
        self.nodes.push(Node::External { size: idx.len() });
        if depth >= self.height_limit || idx.len() <= 1 {
            return slot;
        }
        let dim = points[idx[0]].len();
        // (feature, min, max) over features that still vary in this node
        let splittable: Vec<(usize, f64, f64)> = (0..dim)
            .filter_map(|f| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(points[i][f]), hi.max(points[i][f]))
                });
                (lo < hi).then_some((f, lo, hi))
            })
            .collect();
        if splittable.is_empty() {
            // all points identical
            return slot;
        }
        let (feature, lo, hi) = splittable[rng.random_range(0..splittable.len())];
        let threshold = loop {
            let t = lo + rng.random::<f64>() * (hi - lo);
            if t > lo && t < hi {
                break t;
            }
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| points[i][feature] < threshold);
        let left = self.grow(points, left_idx, depth + 1, rng);
        let right = self.grow(points, right_idx, depth + 1, rng);
        self.nodes[slot] = Node::Internal {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn height_limit(&self) -> usize {
        self.height_limit
    }

    /// Depth of the external node reached by `x` and that node's training size.
    pub fn leaf_of(&self, x: &[f64]) -> (usize, usize) {
        let mut node = 0;
        let mut depth = 0;
        loop {
            match self.nodes[node] {
                Node::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[feature] < threshold { left } else { right };
                    depth += 1;
                }
                Node::External { size } => return (depth, size),
            }
        }
    }

    /// Path length including the `c(size)` correction for unsplit leaves.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let (depth, size) = self.leaf_of(x);
        depth as f64 + external_correction(size)
    }

    /// Maximum depth of any node.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], n: usize) -> usize {
            match nodes[n] {
                Node::Internal { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
                Node::External { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Subsample size; clamped to the number of fitted points.
    pub sample_size: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            sample_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    trees: Vec<ITree>,
    sample_size: usize,
    n_features: usize,
    seed: u64,
}

impl IsolationForest {
    pub fn fit(points: &[&[f64]], params: ForestParams, seed: u64) -> Result<Self> {
        if params.n_trees == 0 {
            return Err(CasaError::Config("n_trees must be >= 1".into()));
        }
        if params.sample_size < 2 {
            return Err(CasaError::Config("forest sample size must be >= 2".into()));
        }
        if points.len() < 2 {
            return Err(CasaError::DegenerateFit(format!(
                "need at least 2 points, got {}",
                points.len()
            )));
        }
        let n_features = points[0].len();
        if let Some(p) = points.iter().find(|p| p.len() != n_features) {
            return Err(CasaError::DimensionMismatch {
                expected: n_features,
                actual: p.len(),
                context: "isolation forest training point",
            });
        }
        if points.iter().all(|p| *p == points[0]) {
            return Err(CasaError::DegenerateFit("fewer than 2 distinct points".into()));
        }

        let sample_size = params.sample_size.min(points.len());
        let height_limit = (sample_size as f64).log2().ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trees = Vec::with_capacity(params.n_trees);
        for _ in 0..params.n_trees {
            let mut chosen = index::sample(&mut rng, points.len(), sample_size).into_vec();
            chosen.sort_unstable();
            let subset: Vec<&[f64]> = chosen.iter().map(|&i| points[i]).collect();
            trees.push(ITree::build(&subset, height_limit, &mut rng));
        }
        Ok(Self {
            trees,
            sample_size,
            n_features,
            seed,
        })
    }

    pub fn trees(&self) -> &[ITree] {
        &self.trees
    }

    pub fn sample_size(&self) -> usize {
        self.sample_size
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn mean_path_length(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.n_features, "embedding dimension mismatch");
        let total: f64 = self.trees.iter().map(|t| t.path_length(x)).sum();
        total / self.trees.len() as f64
    }

    /// Anomaly score in `(0, 1)`; larger means more anomalous.
    pub fn anomaly_score(&self, x: &[f64]) -> f64 {
        score_from_path_length(self.mean_path_length(x), self.sample_size)
    }

    /// `0.5 - score`; positive means inlier.
    pub fn decision_function(&self, x: &[f64]) -> f64 {
        0.5 - self.anomaly_score(x)
    }
}
