//! Experiment grid: market × row subset × feature source × learner × test
//! fraction, driven by one TOML config and reported as plain CSV/JSON.

mod config;
mod report;

use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::backtest::{apc_with, baseline_band, confusion, temporal_split, test_size, ProfitFunction};
use crate::emd::{
    assemble_components, decompose, Component, ComponentSet, Decomposition, EmdConfig, MIN_SIGNAL_LEN,
};
use crate::features::{extract_features, FeatureMatrix, FeatureOptions, Standardizer, FEATURE_COUNT};
use crate::gmm::{assign_clusters, select_g_bic, summary};
use crate::learners::{predict, train, Hyperparameters, LearnerSpec};
use crate::market_data::{
    label_decisions, load_candles, log_returns, quantile_thresholds, CandleSeries, ReturnSeries,
};
use crate::seeding::derive_seed;

pub use config::{
    CellFilter, ClusterKey, ExperimentConfig, GmmSection, LeakageFlags, MarketSource, Source,
};
pub use report::{
    emit_report, figure_file_name, write_figure_csv, write_report_csv, CellScores, ExperimentReport,
    ReportRow, META_FILE, REPORT_FILE,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; the rayon default when unset.
    pub jobs: Option<usize>,
    pub only: CellFilter,
}

type Matrix = Vec<Vec<f64>>;
type SourceSet = Vec<Result<Matrix, String>>;

struct Partition {
    key: ClusterKey,
    /// Indices into the context's feature rows, in time order.
    rows: Vec<usize>,
    skip: Option<String>,
    /// One entry per [`Source::ALL`]; empty for skipped partitions.
    sources: SourceSet,
}

struct Context {
    /// Fraction index this context was built for, when thresholds or the
    /// mixture depend on the training period.
    fraction: Option<usize>,
    matrix: FeatureMatrix,
    partitions: Vec<Partition>,
    meta: Value,
}

struct PreparedMarket {
    index: usize,
    id: String,
    fractions: Vec<usize>,
    contexts: Vec<Context>,
    meta: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct CellKey {
    market: usize,
    cluster: ClusterKey,
    source: Source,
    learner: usize,
    fraction: usize,
}

fn input_err(market: &str) -> impl Fn(&dyn std::fmt::Display) -> PipelineError + '_ {
    move |e| PipelineError::Input(format!("market `{market}`: {e}"))
}

/// Runs every grid cell selected by `opts.only`. Only config and input
/// errors abort; a failing cell becomes a row with a skip reason.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentReport, PipelineError> {
    cfg.validate()?;
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()
        .map_err(|e| PipelineError::Config(format!("cannot start worker pool: {e}")))?;
    let threads = pool.current_num_threads();
    let (rows, market_meta) = pool.install(|| run_grid(cfg, &opts.only))?;

    let skipped = rows.iter().filter(|r| r.outcome.is_err()).count();
    let look_ahead = cfg.leakage.any_look_ahead(cfg.gmm.enabled);
    let mode = |causal: bool| if causal { "causal" } else { "look-ahead" };
    let meta = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "mode": if look_ahead { "LOOK-AHEAD" } else { "CAUSAL" },
        "leakage": {
            "thresholds": mode(cfg.leakage.causal_thresholds),
            "gmm": if cfg.gmm.enabled { mode(cfg.leakage.causal_gmm) } else { "disabled" },
            "emd": mode(cfg.leakage.causal_emd),
            "window_end_label": mode(!cfg.leakage.include_window_end_label),
        },
        "filter": filter_meta(&opts.only),
        "config": cfg,
        "markets": market_meta,
        "cells": { "total": rows.len(), "run": rows.len() - skipped, "skipped": skipped },
        "runtime": {
            "jobs": threads,
            "wall_time_secs": started.elapsed().as_secs_f64(),
        },
    });
    Ok(ExperimentReport {
        rows,
        markets: cfg
            .markets
            .iter()
            .filter(|m| opts.only.matches_market(&m.id))
            .map(|m| m.id.clone())
            .collect(),
        meta,
    })
}

fn filter_meta(f: &CellFilter) -> Value {
    json!({
        "market": f.market,
        "cluster": f.cluster.map(|c| c.to_string()),
        "source": f.source.map(|s| s.name()),
        "learner": f.learner.map(|k| k.name()),
        "fraction": f.fraction,
    })
}

fn run_grid(cfg: &ExperimentConfig, filter: &CellFilter) -> Result<(Vec<ReportRow>, Vec<Value>), PipelineError> {
    let mut markets = Vec::new();
    for (mi, m) in cfg.markets.iter().enumerate() {
        if filter.matches_market(&m.id) {
            markets.push(prepare_market(cfg, mi, filter)?);
        }
    }

    let mut jobs = Vec::new();
    for pm in &markets {
        for ctx in &pm.contexts {
            let fractions = ctx.fraction.map_or_else(|| pm.fractions.clone(), |f| vec![f]);
            for part in &ctx.partitions {
                for &fi in &fractions {
                    for (si, &source) in Source::ALL.iter().enumerate() {
                        if !filter.matches_source(source) {
                            continue;
                        }
                        for (li, params) in cfg.learners.iter().enumerate() {
                            if !filter.matches_learner(params.kind()) {
                                continue;
                            }
                            let key = CellKey {
                                market: pm.index,
                                cluster: part.key,
                                source,
                                learner: li,
                                fraction: fi,
                            };
                            jobs.push((key, pm.id.as_str(), ctx, part, si, params));
                        }
                    }
                }
            }
        }
    }
    info!("running {} grid cells", jobs.len());

    let mut rows: Vec<(CellKey, ReportRow)> = jobs
        .par_iter()
        .map(|&(key, market, ctx, part, si, params)| {
            let data = part.sources.get(si).map(|s| s.as_ref().map_err(String::as_str));
            let row = run_cell(cfg, market, &ctx.matrix, part, data, key.source, params, cfg.test_fractions[key.fraction]);
            (key, row)
        })
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    let meta = markets.into_iter().map(|m| m.meta).collect();
    Ok((rows.into_iter().map(|(_, r)| r).collect(), meta))
}

fn prepare_market(cfg: &ExperimentConfig, index: usize, filter: &CellFilter) -> Result<PreparedMarket, PipelineError> {
    let m = &cfg.markets[index];
    let err = input_err(&m.id);
    let mut series = load_candles(&m.path, &m.id).map_err(|e| err(&e))?;
    if let Some(end) = m.end_timestamp {
        series = series.truncate_after(end).map_err(|e| err(&e))?;
    }
    let returns = log_returns(&series);
    let w = cfg.window;
    if returns.len() + 1 < w + 5 {
        return Err(err(&format!(
            "{} candles leave fewer than 5 feature rows for window {w}",
            series.len()
        )));
    }
    let n_rows = returns.len() + 1 - w;
    info!("market {}: {} candles, {} feature rows", m.id, series.len(), n_rows);

    let fractions: Vec<usize> = (0..cfg.test_fractions.len())
        .filter(|&i| filter.matches_fraction(cfg.test_fractions[i]))
        .collect();
    let per_fraction = cfg.leakage.causal_thresholds || (cfg.gmm.enabled && cfg.leakage.causal_gmm);
    let context_keys: Vec<Option<usize>> = if per_fraction {
        fractions.iter().map(|&f| Some(f)).collect()
    } else {
        vec![None]
    };
    let contexts = context_keys
        .into_iter()
        .map(|ck| prepare_context(cfg, m, &series, &returns, n_rows, ck, filter))
        .collect::<Result<Vec<_>, _>>()?;

    let candles = series.candles();
    let meta = json!({
        "id": m.id,
        "n_candles": series.len(),
        "first_timestamp": candles.first().map(|c| c.timestamp),
        "last_timestamp": candles.last().map(|c| c.timestamp),
        "gap_count": series.gap_count(),
        "feature_rows": n_rows,
        "contexts": contexts.iter().map(|c| c.meta.clone()).collect::<Vec<_>>(),
    });
    Ok(PreparedMarket {
        index,
        id: m.id.clone(),
        fractions,
        contexts,
        meta,
    })
}

#[allow(clippy::too_many_arguments)]
fn prepare_context(
    cfg: &ExperimentConfig,
    m: &MarketSource,
    series: &CandleSeries,
    returns: &ReturnSeries,
    n_rows: usize,
    fraction: Option<usize>,
    filter: &CellFilter,
) -> Result<Context, PipelineError> {
    let err = input_err(&m.id);
    let w = cfg.window;
    // Rows of the unfiltered matrix that fall in this fraction's training period.
    let train_rows = fraction.map(|fi| n_rows - test_size(n_rows, cfg.test_fractions[fi]));

    let threshold_returns = match train_rows {
        Some(n_train) if cfg.leakage.causal_thresholds => &returns.returns[..w - 1 + n_train],
        _ => &returns.returns[..],
    };
    let (lower, upper) = quantile_thresholds(threshold_returns, cfg.quantile).map_err(|e| err(&e))?;
    let labeled = label_decisions(returns.clone(), lower, upper).map_err(|e| err(&e))?;
    let opts = FeatureOptions {
        window: w,
        include_window_end_label: cfg.leakage.include_window_end_label,
    };
    let matrix = extract_features(&labeled, series, opts).map_err(|e| err(&e))?;

    let all_rows: Vec<usize> = (0..matrix.len()).collect();
    let mut partitions = Vec::new();
    let mut gmm_meta = Value::Null;
    if cfg.gmm.enabled {
        let feats = matrix.feature_rows();
        let fit_n = match train_rows {
            Some(n_train) if cfg.leakage.causal_gmm => n_train,
            _ => feats.len(),
        };
        let gcfg = cfg.gmm.to_config(derive_seed(cfg.seed, &[&m.id, "gmm"]));
        let min_size = gcfg.min_cluster_size_for(FEATURE_COUNT);
        let fitted = if fit_n == 0 {
            Err("no training rows to fit the mixture on".to_string())
        } else {
            let z = Standardizer::fit(&feats[..fit_n]).transform(&feats);
            select_g_bic(&z[..fit_n], &gcfg)
                .and_then(|sel| Ok((assign_clusters(&sel.best, &z, min_size)?, sel)))
                .map_err(|e| e.to_string())
        };
        match fitted {
            Ok((assignment, sel)) => {
                let g = sel.best.components();
                info!("market {}: mixture selected G = {g}", m.id);
                gmm_meta = json!({
                    "selected_g": g,
                    "fit_rows": fit_n,
                    "min_cluster_size": min_size,
                    "cluster_sizes": assignment.cluster_sizes,
                    "model": summary(&sel.best, &sel.table),
                });
                for k in 0..g {
                    let rows: Vec<usize> = (0..matrix.len())
                        .filter(|&i| assignment.hard_labels[i] == k)
                        .collect();
                    let skip = assignment.skipped[k].then(|| {
                        format!("cluster {k} has {} rows, below the minimum {min_size}", rows.len())
                    });
                    partitions.push(Partition::new(ClusterKey::Cluster(k), rows, skip));
                }
            }
            Err(e) => {
                info!("market {}: mixture filtering failed: {e}", m.id);
                gmm_meta = json!({ "error": e });
                if !cfg.gmm.include_unfiltered {
                    let reason = format!("mixture filtering failed: {e}");
                    partitions.push(Partition::new(ClusterKey::All, all_rows.clone(), Some(reason)));
                }
            }
        }
        if cfg.gmm.include_unfiltered {
            partitions.insert(0, Partition::new(ClusterKey::All, all_rows, None));
        }
    } else {
        partitions.push(Partition::new(ClusterKey::All, all_rows, None));
    }
    partitions.retain(|p| filter.matches_cluster(p.key));

    partitions
        .par_iter_mut()
        .for_each(|p| p.sources = build_sources(cfg, &matrix, p));

    let meta = json!({
        "fraction": fraction.map(|f| cfg.test_fractions[f]),
        "threshold_returns": threshold_returns.len(),
        "lower_threshold": lower,
        "upper_threshold": upper,
        "class_counts": {
            "sell": labeled.class_counts()[0],
            "hold": labeled.class_counts()[1],
            "buy": labeled.class_counts()[2],
        },
        "gmm": gmm_meta,
        "partitions": partitions.iter().map(|p| json!({
            "cluster": p.key.to_string(),
            "rows": p.rows.len(),
            "skip_reason": p.skip,
        })).collect::<Vec<_>>(),
    });
    Ok(Context {
        fraction,
        matrix,
        partitions,
        meta,
    })
}

impl Partition {
    fn new(key: ClusterKey, rows: Vec<usize>, skip: Option<String>) -> Self {
        Partition {
            key,
            rows,
            skip,
            sources: Vec::new(),
        }
    }
}

fn build_sources(
    cfg: &ExperimentConfig,
    matrix: &FeatureMatrix,
    part: &Partition,
) -> SourceSet {
    if part.skip.is_some() {
        return Vec::new();
    }
    let raw: Matrix = part
        .rows
        .iter()
        .map(|&r| matrix.rows[r].features.to_array().to_vec())
        .collect();
    let columns: Vec<Vec<f64>> = (0..FEATURE_COUNT)
        .map(|j| raw.iter().map(|r| r[j]).collect())
        .collect();
    let label = |j: usize| format!("{}/{}/{}", matrix.market_id, part.key, crate::features::FEATURE_NAMES[j]);

    if !cfg.leakage.causal_emd {
        let sets: Result<Vec<ComponentSet>, String> = columns
            .par_iter()
            .enumerate()
            .map(|(j, col)| {
                decompose(col, label(j), &cfg.emd)
                    .map(|d| assemble_components(&d, cfg.emd.trend_includes_residual))
                    .map_err(|e| format!("decomposition of {} failed: {e}", label(j)))
            })
            .collect();
        return source_set(raw, sets.map(|s| component_matrices(&s)));
    }

    // Each row's components come from the trailing window ending at that
    // row, so no row sees later data. Rows before the first full minimum
    // window reuse the first MIN_SIGNAL_LEN samples.
    let n = part.rows.len();
    let window = cfg.leakage.causal_emd_window;
    if n < MIN_SIGNAL_LEN {
        let reason = format!("cluster {} has {n} rows, too few to decompose", part.key);
        return source_set(raw, Err(reason));
    }
    let per_column: Result<Vec<Vec<[f64; 4]>>, String> = columns
        .par_iter()
        .enumerate()
        .map(|(j, col)| {
            let trend = cfg.emd.trend_includes_residual;
            let head = decompose(&col[..MIN_SIGNAL_LEN], label(j), &cfg.emd)
                .map_err(|e| format!("decomposition of {} failed: {e}", label(j)))?;
            let head = assemble_components(&head, trend);
            let mut values: Vec<[f64; 4]> = (0..MIN_SIGNAL_LEN - 1)
                .map(|i| [head.high[i], head.medium[i], head.low[i], head.trend[i]])
                .collect();
            for i in MIN_SIGNAL_LEN - 1..n {
                let seg = &col[(i + 1).saturating_sub(window)..=i];
                let d = decompose(seg, label(j), &cfg.emd)
                    .map_err(|e| format!("trailing decomposition of {} at row {i} failed: {e}", label(j)))?;
                values.push(last_components(&d, trend));
            }
            Ok(values)
        })
        .collect();
    let matrices = per_column.map(|cols| {
        (0..4)
            .map(|c| (0..n).map(|i| cols.iter().map(|col| col[i][c]).collect()).collect())
            .collect()
    });
    source_set(raw, matrices)
}

fn last_components(d: &Decomposition, trend_includes_residual: bool) -> [f64; 4] {
    let cs = assemble_components(d, trend_includes_residual);
    let i = d.input.len() - 1;
    [cs.high[i], cs.medium[i], cs.low[i], cs.trend[i]]
}

/// Row-major matrices for high, medium, low and trend from per-column sets.
fn component_matrices(sets: &[ComponentSet]) -> Vec<Matrix> {
    let n = sets.first().map_or(0, |s| s.high.len());
    [Component::High, Component::Medium, Component::Low, Component::Trend]
        .into_iter()
        .map(|c| (0..n).map(|i| sets.iter().map(|s| s.get(c)[i]).collect()).collect())
        .collect()
}

fn source_set(raw: Matrix, components: Result<Vec<Matrix>, String>) -> SourceSet {
    let mut set = vec![Ok(raw)];
    match components {
        Ok(ms) => set.extend(ms.into_iter().map(Ok)),
        Err(e) => set.extend(std::iter::repeat_n(Err(e), 4)),
    }
    set
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    market: &str,
    matrix: &FeatureMatrix,
    part: &Partition,
    data: Option<Result<&Matrix, &str>>,
    source: Source,
    params: &Hyperparameters,
    fraction: f64,
) -> ReportRow {
    let cluster = part.key.to_string();
    let fraction_label = fraction.to_string();
    let kind = params.kind();
    let seed = derive_seed(cfg.seed, &[market, &cluster, source.name(), kind.name(), &fraction_label]);
    let mut row = ReportRow {
        market_id: market.to_string(),
        cluster: part.key,
        source,
        learner: kind,
        test_fraction: fraction,
        seed,
        n_train: 0,
        n_test: 0,
        outcome: Err(String::new()),
    };
    row.outcome = (|| {
        if let Some(reason) = &part.skip {
            return Err(reason.clone());
        }
        let x = data.ok_or("feature source was not built")??;
        let (train_idx, test_idx) = temporal_split(part.rows.len(), fraction)
            .map_err(|e| format!("cluster {cluster}: {e}"))?;
        row.n_train = train_idx.len();
        row.n_test = test_idx.len();

        let standardizer = Standardizer::fit(&x[train_idx.clone()]);
        let x_train = standardizer.transform(&x[train_idx.clone()]);
        let x_test = standardizer.transform(&x[test_idx.clone()]);
        let y_train: Vec<_> = part.rows[train_idx].iter().map(|&r| matrix.rows[r].target).collect();
        let y_test: Vec<_> = part.rows[test_idx.clone()].iter().map(|&r| matrix.rows[r].target).collect();
        let next: Vec<f64> = part.rows[test_idx].iter().map(|&r| matrix.rows[r].next_return).collect();

        let model = train(&LearnerSpec::new(params.clone(), seed), &x_train, &y_train).map_err(|e| e.to_string())?;
        let decisions = predict(&model, &x_test).map_err(|e| e.to_string())?;
        let g = ProfitFunction {
            cost_per_trade: cfg.cost_per_trade,
        };
        let scored = apc_with(&decisions, &next, g).map_err(|e| e.to_string())?;
        let baseline_seed = derive_seed(cfg.seed, &[market, &cluster, "baseline", &fraction_label]);
        let baseline = baseline_band(&next, cfg.baseline_replicates, baseline_seed, g).map_err(|e| e.to_string())?;
        debug!(
            "{market}/{cluster}/{source}/{}/{fraction}: apc {} vs p97.5 {}",
            kind.name(),
            scored.apc,
            baseline.p97_5
        );
        Ok(CellScores {
            apc: scored.apc,
            baseline,
            confusion: confusion(&y_test, &decisions),
        })
    })();
    row
}

/// Reads one named numeric column from a delimited file with a header.
pub fn read_column(path: &Path, column: &str) -> Result<Vec<f64>, PipelineError> {
    let input = |m: String| PipelineError::Input(format!("{}: {m}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| input(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| input(e.to_string()))?.clone();
    let idx = headers
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| input(format!("no column named `{column}`")))?;
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| input(e.to_string()))?;
        let raw = rec.get(idx).unwrap_or("").trim();
        let v: f64 = raw
            .parse()
            .map_err(|_| input(format!("line {}: `{raw}` is not a number", i + 2)))?;
        values.push(v);
    }
    Ok(values)
}

/// Decomposes one column of a delimited file.
pub fn decompose_column(path: &Path, column: &str, cfg: &EmdConfig) -> Result<Decomposition, PipelineError> {
    let values = read_column(path, column)?;
    decompose(&values, column, cfg).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
}
