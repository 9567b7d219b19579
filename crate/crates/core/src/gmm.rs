//! Full-covariance Gaussian mixtures fitted by EM, with BIC model selection
//! and hard/soft cluster assignment.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{derive_seed_u64, rng_from};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, PartialEq)]
pub enum GmmError {
    #[error("need at least {g} rows to fit {g} components, got {n}")]
    TooFewRows { n: usize, g: usize },
    #[error("empty feature matrix")]
    Empty,
    #[error("row {0} contains a non-finite value")]
    NonFinite(usize),
    #[error("row {row} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("every restart degenerated for G = {0}")]
    AllRestartsDegenerate(usize),
    #[error("no component count in {min}..={max} could be fitted")]
    NoAdmissibleModel { min: usize, max: usize },
    #[error("invalid gmm configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub g_min: usize,
    pub g_max: usize,
    /// Absolute change in log-likelihood that counts as converged.
    pub tol: f64,
    pub max_iters: usize,
    pub restarts: usize,
    /// Added to every covariance diagonal, scaled by `trace(S) / d` of the
    /// pooled sample covariance `S`.
    pub ridge: f64,
    pub seed: u64,
    /// Defaults to `max(50, 5 d)` when unset.
    pub min_cluster_size: Option<usize>,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            g_min: 1,
            g_max: 4,
            tol: 1e-6,
            max_iters: 500,
            restarts: 10,
            ridge: 1e-6,
            seed: 0,
            min_cluster_size: None,
        }
    }
}

impl GmmConfig {
    pub fn min_cluster_size_for(&self, d: usize) -> usize {
        self.min_cluster_size.unwrap_or_else(|| (5 * d).max(50))
    }

    pub fn validate(&self) -> Result<(), GmmError> {
        if self.g_min == 0 || self.g_max < self.g_min {
            return Err(GmmError::InvalidConfig(format!(
                "component range {}..={} is empty or starts at 0",
                self.g_min, self.g_max
            )));
        }
        if !(self.tol > 0.0) || !(self.ridge > 0.0) || self.max_iters == 0 || self.restarts == 0 {
            return Err(GmmError::InvalidConfig(
                "tol, ridge, max_iters and restarts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Free parameters of a `g`-component full-covariance mixture in `d` dimensions.
pub fn parameter_count(g: usize, d: usize) -> usize {
    (g - 1) + g * d + g * d * (d + 1) / 2
}

/// `-2 L + p ln n`; smaller is better.
pub fn bic(log_likelihood: f64, n_params: usize, n: usize) -> f64 {
    -2.0 * log_likelihood + n_params as f64 * (n as f64).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
    pub n_params: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Log-likelihood after each E-step of the winning restart.
    pub log_likelihood_trace: Vec<f64>,
    pub n: usize,
}

impl GmmModel {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn bic(&self) -> f64 {
        bic(self.log_likelihood, self.n_params, self.n)
    }

    /// Reorders components; used to check label-permutation invariance.
    pub fn permuted(&self, order: &[usize]) -> GmmModel {
        let mut m = self.clone();
        m.weights = order.iter().map(|&i| self.weights[i]).collect();
        m.means = order.iter().map(|&i| self.means[i].clone()).collect();
        m.covariances = order.iter().map(|&i| self.covariances[i].clone()).collect();
        m
    }
}

/// Lower Cholesky factor (row-major, d x d) and log-determinant of a covariance.
struct Factor {
    lower: Vec<f64>,
    log_det: f64,
}

fn factor(cov: &DMatrix<f64>) -> Option<Factor> {
    let d = cov.nrows();
    let chol = cov.clone().cholesky()?;
    let l = chol.l();
    let mut lower = vec![0.0; d * d];
    let mut log_det = 0.0;
    for i in 0..d {
        for j in 0..=i {
            lower[i * d + j] = l[(i, j)];
        }
        let diag = l[(i, i)];
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        log_det += 2.0 * diag.ln();
    }
    Some(Factor { lower, log_det })
}

fn mahalanobis(f: &Factor, x: &[f64], mean: &[f64], scratch: &mut [f64]) -> f64 {
    let d = mean.len();
    let mut acc = 0.0;
    for i in 0..d {
        let mut v = x[i] - mean[i];
        let row = &f.lower[i * d..i * d + i];
        for (l, z) in row.iter().zip(scratch.iter()) {
            v -= l * z;
        }
        v /= f.lower[i * d + i];
        scratch[i] = v;
        acc += v * v;
    }
    acc
}

struct Params {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

/// Log of `pi_g phi(x_i)` for every row and component, row-major `n x g`.
fn log_joint(data: &Data, p: &Params) -> Option<Vec<f64>> {
    let g = p.weights.len();
    let factors: Vec<Factor> = p.covariances.iter().map(factor).collect::<Option<_>>()?;
    let mut out = vec![0.0; data.n * g];
    let mut scratch = vec![0.0; data.d];
    let base = data.d as f64 * LN_2PI;
    for i in 0..data.n {
        let x = data.row(i);
        for k in 0..g {
            let maha = mahalanobis(&factors[k], x, &p.means[k], &mut scratch);
            out[i * g + k] = p.weights[k].ln() - 0.5 * (base + factors[k].log_det + maha);
        }
    }
    Some(out)
}

/// Normalises each row of `log_joint` in place into responsibilities and
/// returns the total log-likelihood.
fn normalise_rows(log_joint: &mut [f64], g: usize) -> f64 {
    let mut ll = 0.0;
    for row in log_joint.chunks_mut(g) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter() {
            s += (v - max).exp();
        }
        let lse = max + s.ln();
        ll += lse;
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    ll
}

struct Data {
    values: Vec<f64>,
    n: usize,
    d: usize,
}

impl Data {
    fn new(rows: &[Vec<f64>]) -> Result<Self, GmmError> {
        let n = rows.len();
        if n == 0 {
            return Err(GmmError::Empty);
        }
        let d = rows[0].len();
        let mut values = Vec::with_capacity(n * d);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(GmmError::DimensionMismatch {
                    row: i,
                    expected: d,
                    got: r.len(),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(GmmError::NonFinite(i));
            }
            values.extend_from_slice(r);
        }
        Ok(Self { values, n, d })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    fn pooled_covariance(&self) -> DMatrix<f64> {
        let mut mean = vec![0.0; self.d];
        for i in 0..self.n {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.n as f64);
        let w = vec![1.0; self.n];
        weighted_scatter(self, &w, &mean, self.n as f64)
    }
}

/// `sum_i w_i (x_i - mean)(x_i - mean)^T / total`.
fn weighted_scatter(data: &Data, w: &[f64], mean: &[f64], total: f64) -> DMatrix<f64> {
    let d = data.d;
    let mut acc = vec![0.0; d * d];
    let mut diff = vec![0.0; d];
    for i in 0..data.n {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for (o, (x, m)) in diff.iter_mut().zip(data.row(i).iter().zip(mean)) {
            *o = x - m;
        }
        for a in 0..d {
            let wa = wi * diff[a];
            for b in a..d {
                acc[a * d + b] += wa * diff[b];
            }
        }
    }
    DMatrix::from_fn(d, d, |a, b| {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        acc[lo * d + hi] / total
    })
}

fn ridge_amount(pooled: &DMatrix<f64>, ridge: f64) -> f64 {
    let d = pooled.nrows() as f64;
    let tr = pooled.trace();
    if tr > 0.0 && tr.is_finite() {
        ridge * tr / d
    } else {
        ridge
    }
}

/// k-means++ style seeding of the means.
fn seed_means<R: Rng>(data: &Data, g: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut means = vec![data.row(rng.random_range(0..data.n)).to_vec()];
    let mut d2 = vec![f64::INFINITY; data.n];
    while means.len() < g {
        let last = means.last().unwrap();
        for (i, best) in d2.iter_mut().enumerate() {
            let dist: f64 = data
                .row(i)
                .iter()
                .zip(last)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            *best = best.min(dist);
        }
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = data.n - 1;
            for (i, v) in d2.iter().enumerate() {
                acc += v;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..data.n)
        };
        means.push(data.row(pick).to_vec());
    }
    means
}

struct RestartResult {
    params: Params,
    log_likelihood: f64,
    trace: Vec<f64>,
    converged: bool,
    iterations: usize,
}

fn run_restart(
    data: &Data,
    g: usize,
    cfg: &GmmConfig,
    pooled: &DMatrix<f64>,
    ridge: f64,
    seed: u64,
) -> Option<RestartResult> {
    let mut rng = rng_from(seed);
    let d = data.d;
    let n = data.n;
    let mut init_cov = pooled.clone();
    for a in 0..d {
        init_cov[(a, a)] += ridge;
    }
    let mut params = Params {
        weights: vec![1.0 / g as f64; g],
        means: seed_means(data, g, &mut rng),
        covariances: vec![init_cov; g],
    };
    let min_weight = 1.0 / (10.0 * n as f64);

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut resp = log_joint(data, &params)?;
    let mut ll = normalise_rows(&mut resp, g);
    trace.push(ll);
    while iterations < cfg.max_iters {
        // M-step
        let mut weights = Vec::with_capacity(g);
        let mut means = Vec::with_capacity(g);
        let mut covariances = Vec::with_capacity(g);
        let mut w = vec![0.0; n];
        for k in 0..g {
            let mut nk = 0.0;
            let mut mean = vec![0.0; d];
            for i in 0..n {
                let r = resp[i * g + k];
                w[i] = r;
                nk += r;
                for (m, x) in mean.iter_mut().zip(data.row(i)) {
                    *m += r * x;
                }
            }
            let weight = nk / n as f64;
            if !(weight >= min_weight) {
                return None;
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut cov = weighted_scatter(data, &w, &mean, nk);
            for a in 0..d {
                cov[(a, a)] += ridge;
            }
            weights.push(weight);
            means.push(mean);
            covariances.push(cov);
        }
        let candidate = Params {
            weights,
            means,
            covariances,
        };
        let mut next_resp = log_joint(data, &candidate)?;
        let next = normalise_rows(&mut next_resp, g);
        if !next.is_finite() {
            return None;
        }
        // The ridge makes the M-step slightly inexact; near the fixed point
        // that can cost likelihood. Keep the better parameters and stop.
        if next < ll {
            converged = true;
            break;
        }
        params = candidate;
        resp = next_resp;
        iterations += 1;
        trace.push(next);
        let delta = next - ll;
        ll = next;
        if delta.abs() < cfg.tol {
            converged = true;
            break;
        }
    }
    Some(RestartResult {
        params,
        log_likelihood: ll,
        trace,
        converged,
        iterations,
    })
}

/// Best of `cfg.restarts` EM runs by final log-likelihood (ties to the
/// earliest restart).
pub fn fit_gmm(rows: &[Vec<f64>], g: usize, cfg: &GmmConfig) -> Result<GmmModel, GmmError> {
    cfg.validate()?;
    if g == 0 {
        return Err(GmmError::InvalidConfig("G must be at least 1".into()));
    }
    let data = Data::new(rows)?;
    if data.n < g {
        return Err(GmmError::TooFewRows { n: data.n, g });
    }
    let pooled = data.pooled_covariance();
    let ridge = ridge_amount(&pooled, cfg.ridge);

    let results: Vec<Option<RestartResult>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed_u64(cfg.seed, &[g as u64, r as u64]);
            run_restart(&data, g, cfg, &pooled, ridge, seed)
        })
        .collect();

    let mut best: Option<RestartResult> = None;
    for res in results.into_iter().flatten() {
        if best
            .as_ref()
            .is_none_or(|b| res.log_likelihood > b.log_likelihood)
        {
            best = Some(res);
        }
    }
    let best = best.ok_or(GmmError::AllRestartsDegenerate(g))?;
    Ok(GmmModel {
        weights: best.params.weights,
        means: best.params.means,
        covariances: best.params.covariances,
        log_likelihood: best.log_likelihood,
        n_params: parameter_count(g, data.d),
        converged: best.converged,
        iterations: best.iterations,
        log_likelihood_trace: best.trace,
        n: data.n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BicEntry {
    pub g: usize,
    pub bic: Option<f64>,
    pub log_likelihood: Option<f64>,
    pub n_params: usize,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub best: GmmModel,
    pub table: Vec<BicEntry>,
}

/// Fits every G in the configured range and keeps the smallest BIC (ties to
/// the smaller G). A G whose fit fails, or whose hard partition leaves a
/// cluster below the minimum size, is recorded as skipped.
pub fn select_g_bic(rows: &[Vec<f64>], cfg: &GmmConfig) -> Result<Selection, GmmError> {
    cfg.validate()?;
    let data_dim = rows.first().map_or(0, Vec::len);
    let min_size = cfg.min_cluster_size_for(data_dim);
    let mut table = Vec::new();
    let mut best: Option<GmmModel> = None;
    for g in cfg.g_min..=cfg.g_max {
        let n_params = parameter_count(g, data_dim);
        let model = match fit_gmm(rows, g, cfg) {
            Ok(m) => m,
            Err(e @ (GmmError::Empty | GmmError::NonFinite(_) | GmmError::DimensionMismatch { .. })) => {
                return Err(e)
            }
            Err(e) => {
                table.push(BicEntry {
                    g,
                    bic: None,
                    log_likelihood: None,
                    n_params,
                    skipped: Some(e.to_string()),
                });
                continue;
            }
        };
        let score = model.bic();
        let mut skipped = None;
        if g > 1 {
            let a = assign_clusters(&model, rows, min_size)?;
            if let Some(small) = a.cluster_sizes.iter().find(|&&s| s < min_size) {
                skipped = Some(format!(
                    "cluster of {small} rows is below the minimum size {min_size}"
                ));
            }
        }
        table.push(BicEntry {
            g,
            bic: Some(score),
            log_likelihood: Some(model.log_likelihood),
            n_params,
            skipped: skipped.clone(),
        });
        if skipped.is_none() && best.as_ref().is_none_or(|b| score < b.bic()) {
            best = Some(model);
        }
    }
    let best = best.ok_or(GmmError::NoAdmissibleModel {
        min: cfg.g_min,
        max: cfg.g_max,
    })?;
    Ok(Selection { best, table })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub hard_labels: Vec<usize>,
    /// Row-major `n x G`.
    pub responsibilities: Vec<Vec<f64>>,
    pub cluster_sizes: Vec<usize>,
    /// Clusters smaller than the minimum size; downstream training skips them.
    pub skipped: Vec<bool>,
}

impl ClusterAssignment {
    /// Delimited text `row_t,hard_label,resp_0..resp_{G-1}`.
    pub fn write_csv<W: std::io::Write>(&self, row_times: &[usize], out: W) -> csv::Result<()> {
        let g = self.cluster_sizes.len();
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["row_t".to_string(), "hard_label".to_string()];
        header.extend((0..g).map(|k| format!("resp_{k}")));
        wtr.write_record(&header)?;
        for ((t, label), resp) in row_times
            .iter()
            .zip(&self.hard_labels)
            .zip(&self.responsibilities)
        {
            let mut rec = vec![t.to_string(), label.to_string()];
            rec.extend(resp.iter().map(|r| r.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Posterior responsibilities and argmax labels (ties to the lowest index).
pub fn assign_clusters(
    model: &GmmModel,
    rows: &[Vec<f64>],
    min_cluster_size: usize,
) -> Result<ClusterAssignment, GmmError> {
    let data = Data::new(rows)?;
    if data.d != model.dim() {
        return Err(GmmError::DimensionMismatch {
            row: 0,
            expected: model.dim(),
            got: data.d,
        });
    }
    let g = model.components();
    let params = Params {
        weights: model.weights.clone(),
        means: model.means.clone(),
        covariances: model.covariances.clone(),
    };
    let mut resp = log_joint(&data, &params).ok_or(GmmError::AllRestartsDegenerate(g))?;
    normalise_rows(&mut resp, g);
    let mut hard_labels = Vec::with_capacity(data.n);
    let mut cluster_sizes = vec![0; g];
    let mut responsibilities = Vec::with_capacity(data.n);
    for row in resp.chunks(g) {
        let mut best = 0;
        for k in 1..g {
            if row[k] > row[best] {
                best = k;
            }
        }
        hard_labels.push(best);
        cluster_sizes[best] += 1;
        responsibilities.push(row.to_vec());
    }
    let skipped = cluster_sizes.iter().map(|&s| s < min_cluster_size).collect();
    Ok(ClusterAssignment {
        hard_labels,
        responsibilities,
        cluster_sizes,
        skipped,
    })
}

/// Plain-text model summary: weights, means, covariance diagonals, BIC table.
pub fn summary(model: &GmmModel, table: &[BicEntry]) -> serde_json::Value {
    serde_json::json!({
        "components": model.components(),
        "log_likelihood": model.log_likelihood,
        "bic": model.bic(),
        "converged": model.converged,
        "iterations": model.iterations,
        "weights": model.weights,
        "means": model.means,
        "covariance_diagonals": model
            .covariances
            .iter()
            .map(|c| (0..c.nrows()).map(|i| c[(i, i)]).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
        "bic_table": table,
    })
}
