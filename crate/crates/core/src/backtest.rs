//! Accumulated percentage change scoring, temporal splits and the random
//! baseline band.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::learners::random_policy;
use crate::market_data::{quantile_sorted, DecisionLabel};

#[derive(Debug, Error, PartialEq)]
pub enum BacktestError {
    #[error("{decisions} decisions but {returns} returns")]
    LengthMismatch { decisions: usize, returns: usize },
    #[error("test fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("split of {n} rows at fraction {fraction} leaves an empty side")]
    EmptySide { n: usize, fraction: f64 },
    #[error("need at least 5 rows to split, got {0}")]
    TooFewRows(usize),
    #[error("baseline needs at least 100 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("empty return series")]
    EmptyReturns,
}

/// Unit long/short/flat profit per step, less a fixed cost on every
/// non-Hold decision.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, serde::Deserialize)]
pub struct ProfitFunction {
    pub cost_per_trade: f64,
}

impl ProfitFunction {
    pub fn profit(&self, next_return: f64, decision: DecisionLabel) -> f64 {
        match decision {
            DecisionLabel::Buy => next_return - self.cost_per_trade,
            DecisionLabel::Sell => -next_return - self.cost_per_trade,
            DecisionLabel::Hold => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestResult {
    pub apc: f64,
    pub per_step_pnl: Vec<f64>,
    /// Decisions per class, indexed by label code.
    pub n_trades: [usize; 3],
    /// `(train_fraction, test_fraction)` when scored on a temporal split.
    pub split: Option<(f64, f64)>,
}

impl BacktestResult {
    pub fn with_split(mut self, test_fraction: f64) -> Self {
        self.split = Some((1.0 - test_fraction, test_fraction));
        self
    }
}

/// Sum of `g(next_returns[t], decisions[t])` with the frictionless profit.
pub fn apc(decisions: &[DecisionLabel], next_returns: &[f64]) -> Result<BacktestResult, BacktestError> {
    apc_with(decisions, next_returns, ProfitFunction::default())
}

pub fn apc_with(
    decisions: &[DecisionLabel],
    next_returns: &[f64],
    g: ProfitFunction,
) -> Result<BacktestResult, BacktestError> {
    if decisions.len() != next_returns.len() {
        return Err(BacktestError::LengthMismatch {
            decisions: decisions.len(),
            returns: next_returns.len(),
        });
    }
    let mut n_trades = [0usize; 3];
    let per_step_pnl: Vec<f64> = decisions
        .iter()
        .zip(next_returns)
        .map(|(&d, &w)| {
            n_trades[d.index()] += 1;
            g.profit(w, d)
        })
        .collect();
    Ok(BacktestResult {
        apc: per_step_pnl.iter().sum(),
        per_step_pnl,
        n_trades,
        split: None,
    })
}

/// Number of test rows for `n` rows at `fraction`: `ceil(n * fraction)`.
/// A 1e-9 slack absorbs products like `0.7 * 10 = 7.000000000000001`.
pub fn test_size(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction - 1e-9).ceil().max(0.0) as usize
}

/// Time-ordered split: the last `ceil(n f)` rows test, everything earlier trains.
pub fn temporal_split(n: usize, test_fraction: f64) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>), BacktestError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(BacktestError::InvalidFraction(test_fraction));
    }
    if n < 5 {
        return Err(BacktestError::TooFewRows(n));
    }
    let n_test = test_size(n, test_fraction);
    if n_test == 0 || n_test >= n {
        return Err(BacktestError::EmptySide {
            n,
            fraction: test_fraction,
        });
    }
    Ok((0..n - n_test, n - n_test..n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaselineBand {
    pub mean: f64,
    pub p2_5: f64,
    pub p97_5: f64,
    pub replicates: usize,
}

pub const DEFAULT_REPLICATES: usize = 1000;

/// APC of `replicates` uniform random policies, replicate `r` seeded with
/// `seed + r`, summarised by the mean and 2.5/97.5 percentiles.
pub fn baseline_band(
    next_returns: &[f64],
    replicates: usize,
    seed: u64,
    g: ProfitFunction,
) -> Result<BaselineBand, BacktestError> {
    if next_returns.is_empty() {
        return Err(BacktestError::EmptyReturns);
    }
    if replicates < 100 {
        return Err(BacktestError::TooFewReplicates(replicates));
    }
    let scores = baseline_scores(next_returns, replicates, seed, g);
    let mean = scores.iter().sum::<f64>() / replicates as f64;
    let mut sorted = scores;
    sorted.sort_by(f64::total_cmp);
    Ok(BaselineBand {
        mean,
        p2_5: quantile_sorted(&sorted, 0.025),
        p97_5: quantile_sorted(&sorted, 0.975),
        replicates,
    })
}

/// Per-replicate APCs in replicate order.
pub fn baseline_scores(next_returns: &[f64], replicates: usize, seed: u64, g: ProfitFunction) -> Vec<f64> {
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let policy = random_policy(next_returns.len(), seed.wrapping_add(r as u64));
            policy
                .iter()
                .zip(next_returns)
                .map(|(&d, &w)| g.profit(w, d))
                .sum()
        })
        .collect()
}

/// Always picks the side of the realised move; attains `sum |w|`.
pub fn oracle_policy(next_returns: &[f64]) -> Vec<DecisionLabel> {
    next_returns
        .iter()
        .map(|&w| {
            if w > 0.0 {
                DecisionLabel::Buy
            } else if w < 0.0 {
                DecisionLabel::Sell
            } else {
                DecisionLabel::Hold
            }
        })
        .collect()
}

/// `confusion[true][predicted]` counts by label code.
pub fn confusion(truth: &[DecisionLabel], predicted: &[DecisionLabel]) -> [[usize; 3]; 3] {
    let mut m = [[0usize; 3]; 3];
    for (t, p) in truth.iter().zip(predicted) {
        m[t.index()][p.index()] += 1;
    }
    m
}
