//! Bagged Gini trees with per-split feature subsampling.

use rand::Rng;
use rayon::prelude::*;

use super::tree::{grow, Columns, Gini, Tree, TreeParams};
use crate::seeding::{derive_seed_u64, rng_from};

#[derive(Debug, Clone, Copy)]
pub struct ForestParams {
    pub n_trees: usize,
    pub mtry: usize,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    trees: Vec<Tree<u8>>,
}

impl ForestModel {
    pub fn fit(rows: &[Vec<f64>], labels: &[u8], params: ForestParams, seed: u64) -> Self {
        let x = Columns::from_rows(rows);
        let n = rows.len();
        let objective = Gini { labels, classes: 3 };
        let tree_params = TreeParams {
            max_depth: params.max_depth,
            min_leaf: params.min_leaf,
            mtry: Some(params.mtry.min(x.d()).max(1)),
        };
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng_from(derive_seed_u64(seed, &[t as u64]));
                let sample: Vec<u32> = (0..n).map(|_| rng.random_range(0..n) as u32).collect();
                grow(&x, &sample, &objective, tree_params, Some(&mut rng))
            })
            .collect();
        Self { trees }
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Plurality over trees, ties to the lowest class code.
    pub fn predict(&self, row: &[f64]) -> u8 {
        let mut votes = [0usize; 3];
        for t in &self.trees {
            votes[t.predict(row) as usize] += 1;
        }
        let mut best = 0;
        for c in 1..3 {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        best as u8
    }
}
