//! Brute-force k-nearest-neighbour vote.

use std::cmp::Ordering;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    rows: Vec<Vec<f64>>,
    labels: Vec<u8>,
    k: usize,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KnnModel {
    pub fn fit(rows: &[Vec<f64>], labels: &[u8], k: usize) -> Self {
        Self {
            rows: rows.to_vec(),
            labels: labels.to_vec(),
            k,
        }
    }

    /// Training indices of the `k` nearest rows, nearest first. Equal
    /// distances order by training index.
    pub fn neighbours(&self, query: &[f64]) -> Vec<usize> {
        let mut dist: Vec<(f64, usize)> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (squared_distance(r, query), i))
            .collect();
        let by = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        let k = self.k.min(dist.len());
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, by);
            dist.truncate(k);
        }
        dist.sort_unstable_by(by);
        dist.into_iter().map(|(_, i)| i).collect()
    }

    /// Majority vote; among classes tied for the most votes, the one whose
    /// member appears first in the nearest-first neighbour list wins.
    pub fn predict(&self, query: &[f64]) -> u8 {
        let nb = self.neighbours(query);
        let mut votes = [0usize; 3];
        for &i in &nb {
            votes[self.labels[i] as usize] += 1;
        }
        let top = *votes.iter().max().unwrap();
        nb.iter()
            .map(|&i| self.labels[i])
            .find(|&c| votes[c as usize] == top)
            .expect("at least one neighbour")
    }
}
