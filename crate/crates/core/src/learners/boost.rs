//! Multiclass gradient boosting on the softmax deviance: one regression
//! tree per observed class per round, fitted to `onehot - softmax`, leaf
//! values are residual means scaled by the learning rate.

use rand::seq::index::sample;

use super::tree::{grow, Columns, SquaredError, Tree, TreeParams};
use crate::seeding::rng_from;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct BoostParams {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub subsample: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostModel {
    /// Observed class codes in ascending order.
    classes: Vec<u8>,
    init: Vec<f64>,
    learning_rate: f64,
    /// `rounds x classes.len()`.
    trees: Vec<Vec<Tree<f64>>>,
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
}

impl BoostModel {
    pub fn fit(rows: &[Vec<f64>], labels: &[u8], params: BoostParams, seed: u64) -> Self {
        let n = rows.len();
        let mut counts = [0usize; 3];
        for &l in labels {
            counts[l as usize] += 1;
        }
        let classes: Vec<u8> = (0..3u8).filter(|&c| counts[c as usize] > 0).collect();
        let k = classes.len();
        let init: Vec<f64> = classes
            .iter()
            .map(|&c| (counts[c as usize] as f64 / n as f64).ln())
            .collect();
        let mut model = Self {
            classes,
            init,
            learning_rate: params.learning_rate,
            trees: Vec::new(),
        };
        if k < 2 {
            return model;
        }

        let x = Columns::from_rows(rows);
        let slot: Vec<usize> = labels
            .iter()
            .map(|l| model.classes.iter().position(|c| c == l).unwrap())
            .collect();
        let mut scores: Vec<f64> = (0..n).flat_map(|_| model.init.clone()).collect();
        let tree_params = TreeParams {
            max_depth: Some(params.max_depth),
            min_leaf: 1,
            mtry: None,
        };
        let mut rng = rng_from(seed);
        let bag = ((params.subsample * n as f64).round() as usize).clamp(1, n);
        let mut residuals = vec![0.0; n];
        let mut probs = vec![0.0; n * k];

        for _ in 0..params.rounds {
            probs.copy_from_slice(&scores);
            for row in probs.chunks_mut(k) {
                softmax_in_place(row);
            }
            let rows_used: Vec<u32> = if bag < n {
                let mut s: Vec<u32> = sample(&mut rng, n, bag).into_iter().map(|i| i as u32).collect();
                s.sort_unstable();
                s
            } else {
                (0..n as u32).collect()
            };
            let mut round = Vec::with_capacity(k);
            for c in 0..k {
                for i in 0..n {
                    let target = if slot[i] == c { 1.0 } else { 0.0 };
                    residuals[i] = target - probs[i * k + c];
                }
                let tree = grow::<_, ChaCha8Rng>(
                    &x,
                    &rows_used,
                    &SquaredError { targets: &residuals },
                    tree_params,
                    None,
                );
                for i in 0..n {
                    scores[i * k + c] += params.learning_rate * tree.predict(&rows[i]);
                }
                round.push(tree);
            }
            model.trees.push(round);
        }
        model
    }

    pub fn rounds(&self) -> usize {
        self.trees.len()
    }

    /// Raw additive scores for the observed classes.
    pub fn scores(&self, row: &[f64]) -> Vec<f64> {
        let mut s = self.init.clone();
        for round in &self.trees {
            for (v, t) in s.iter_mut().zip(round) {
                *v += self.learning_rate * t.predict(row);
            }
        }
        s
    }

    /// Highest score, ties to the lowest class code.
    pub fn predict(&self, row: &[f64]) -> u8 {
        let s = self.scores(row);
        let mut best = 0;
        for c in 1..s.len() {
            if s[c] > s[best] {
                best = c;
            }
        }
        self.classes[best]
    }
}
