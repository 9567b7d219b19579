#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use marketsift::market_data::write_candles;
use marketsift::seeding::rng_from;
use marketsift::synth::{synth_market, SynthSpec};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Gaussian random walk of `n` samples starting at 0.
pub fn random_walk(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    let mut x = 0.0;
    (0..n)
        .map(|_| {
            let step: f64 = StandardNormal.sample(&mut rng);
            x += step;
            x
        })
        .collect()
}

pub fn value_range(x: &[f64]) -> f64 {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Exhaustive KNN: full sort by (squared distance, index), then the class
/// with most votes, ties to the class met first in that order.
pub fn knn_oracle(rows: &[Vec<f64>], labels: &[u8], k: usize, query: &[f64]) -> u8 {
    let mut order: Vec<(f64, usize)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let nearest = &order[..k.min(order.len())];
    let mut votes = [0usize; 3];
    for &(_, i) in nearest {
        votes[labels[i] as usize] += 1;
    }
    let best = votes.iter().copied().max().unwrap();
    for &(_, i) in nearest {
        if votes[labels[i] as usize] == best {
            return labels[i];
        }
    }
    unreachable!()
}

/// Small-integer rows so that distance ties are common.
pub fn integer_rows<R: Rng>(rng: &mut R, n: usize, d: usize, span: i32) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-span..=span) as f64).collect())
        .collect()
}

pub fn write_synth(dir: &Path, name: &str, spec: &SynthSpec) -> PathBuf {
    let market = synth_market(spec).expect("valid synth spec");
    let path = dir.join(format!("{name}.csv"));
    write_candles(&market.series, fs::File::create(&path).unwrap()).unwrap();
    path
}

/// A small KNN-only config over one market file, GMM off.
pub fn small_config(path: &Path, extra: &str) -> String {
    format!(
        "seed = 7\n\
         test_fractions = [0.3]\n\
         baseline_replicates = 200\n\
         learners = [{{ kind = \"knn\", k = 5 }}]\n\
         {extra}\n\
         [[markets]]\n\
         id = \"syn\"\n\
         path = \"{}\"\n",
        path.display()
    )
}
