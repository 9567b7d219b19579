//! Rolling-window feature extraction.
//!
//! Each row summarises the `w` closes ending at index `t` and is paired with
//! the label at `t`, which encodes the move from `close[t]` to `close[t+1]`.
//! Nothing in a row reads a close past `t` or a label at or past `t` (unless
//! `include_window_end_label` is set, which deliberately leaks the target).

use rayon::prelude::*;
use thiserror::Error;

use crate::market_data::{CandleSeries, DecisionLabel, LabeledSeries};

pub const DEFAULT_WINDOW: usize = 15;
pub const FEATURE_COUNT: usize = 8;
pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "buy_prop",
    "sell_prop",
    "close",
    "lm_intercept",
    "lm_slope",
    "peak_curv",
    "peak_mag",
    "est_pct_change",
];

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("window length must be at least 3, got {0}")]
    WindowTooShort(usize),
    #[error("need at least {needed} candles for window {window}, got {got}")]
    InsufficientData {
        window: usize,
        needed: usize,
        got: usize,
    },
    #[error("label count {labels} does not match candle count {candles} - 1")]
    Misaligned { labels: usize, candles: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureVector {
    pub buy_proportion: f64,
    pub sell_proportion: f64,
    pub close_price: f64,
    pub lm_intercept: f64,
    pub lm_slope: f64,
    pub peaks_avg_curvature: f64,
    pub peaks_avg_magnitude: f64,
    pub est_pct_change: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        [
            self.buy_proportion,
            self.sell_proportion,
            self.close_price,
            self.lm_intercept,
            self.lm_slope,
            self.peaks_avg_curvature,
            self.peaks_avg_magnitude,
            self.est_pct_change,
        ]
    }

    pub fn from_array(a: [f64; FEATURE_COUNT]) -> Self {
        Self {
            buy_proportion: a[0],
            sell_proportion: a[1],
            close_price: a[2],
            lm_intercept: a[3],
            lm_slope: a[4],
            peaks_avg_curvature: a[5],
            peaks_avg_magnitude: a[6],
            est_pct_change: a[7],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    /// Window-end index into the label series.
    pub t: usize,
    pub features: FeatureVector,
    pub target: DecisionLabel,
    /// Realised log return `ln(close[t+1] / close[t])` the target was built from.
    pub next_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub market_id: String,
    pub window_length: usize,
    pub rows: Vec<FeatureRow>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn feature_rows(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.features.to_array().to_vec())
            .collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.features.to_array()[j]).collect()
    }

    pub fn targets(&self) -> Vec<DecisionLabel> {
        self.rows.iter().map(|r| r.target).collect()
    }

    /// Delimited text with a fixed header; floats use shortest round-trip form.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record([
            "t",
            "buy_prop",
            "sell_prop",
            "close",
            "lm_intercept",
            "lm_slope",
            "peak_curv",
            "peak_mag",
            "est_pct_change",
            "target",
        ])?;
        for row in &self.rows {
            let mut rec = vec![row.t.to_string()];
            rec.extend(row.features.to_array().iter().map(|v| v.to_string()));
            rec.push(row.target.code().to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureOptions {
    pub window: usize,
    /// Count labels `t-w+1 ..= t` instead of `t-w ..= t-1`. Leaks the target.
    pub include_window_end_label: bool,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            include_window_end_label: false,
        }
    }
}

/// OLS of `closes[k]` on `k = 0..w-1`. Returns `(intercept, slope)`.
pub fn fit_window_linear_model(closes: &[f64]) -> (f64, f64) {
    assert!(closes.len() >= 2, "linear model needs two points");
    let n = closes.len() as f64;
    let k_mean = (n - 1.0) / 2.0;
    let y_mean = closes.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (k, &y) in closes.iter().enumerate() {
        let dk = k as f64 - k_mean;
        sxy += dk * (y - y_mean);
        sxx += dk * dk;
    }
    let slope = sxy / sxx;
    (y_mean - slope * k_mean, slope)
}

/// Mean second difference and mean height over strict interior peaks,
/// `(0, 0)` when there are none.
pub fn peak_statistics(closes: &[f64]) -> (f64, f64) {
    assert!(closes.len() >= 3, "peak statistics need three points");
    let mut curv = 0.0;
    let mut mag = 0.0;
    let mut count = 0usize;
    for w in closes.windows(3) {
        if w[0] < w[1] && w[1] > w[2] {
            curv += w[0] - 2.0 * w[1] + w[2];
            mag += w[1];
            count += 1;
        }
    }
    if count == 0 {
        (0.0, 0.0)
    } else {
        (curv / count as f64, mag / count as f64)
    }
}

/// Features of the window ending at `t`. `closes` is indexed like the candle
/// series and `labels` like the return series.
pub fn window_features(
    closes: &[f64],
    labels: &[DecisionLabel],
    t: usize,
    opts: FeatureOptions,
) -> FeatureVector {
    let w = opts.window;
    let window = &closes[t + 1 - w..=t];

    let label_range = if opts.include_window_end_label {
        t + 1 - w..t + 1
    } else {
        // The first row only has w-1 earlier labels; the missing one counts
        // as neither Buy nor Sell.
        t.saturating_sub(w)..t
    };
    let (mut buys, mut sells) = (0usize, 0usize);
    for l in &labels[label_range] {
        match l {
            DecisionLabel::Buy => buys += 1,
            DecisionLabel::Sell => sells += 1,
            DecisionLabel::Hold => {}
        }
    }

    let (lm_intercept, lm_slope) = fit_window_linear_model(window);
    let (peaks_avg_curvature, peaks_avg_magnitude) = peak_statistics(window);
    FeatureVector {
        buy_proportion: buys as f64 / w as f64,
        sell_proportion: sells as f64 / w as f64,
        close_price: closes[t],
        lm_intercept,
        lm_slope,
        peaks_avg_curvature,
        peaks_avg_magnitude,
        est_pct_change: (closes[t] / closes[t - 1]).ln(),
    }
}

/// One row per window end `t` in `w-1 ..= L-1`, `L` the label count.
pub fn extract_features(
    labeled: &LabeledSeries,
    candles: &CandleSeries,
    opts: FeatureOptions,
) -> Result<FeatureMatrix, FeatureError> {
    let w = opts.window;
    if w < 3 {
        return Err(FeatureError::WindowTooShort(w));
    }
    if candles.len() < w + 1 {
        return Err(FeatureError::InsufficientData {
            window: w,
            needed: w + 1,
            got: candles.len(),
        });
    }
    if labeled.len() + 1 != candles.len() {
        return Err(FeatureError::Misaligned {
            labels: labeled.len(),
            candles: candles.len(),
        });
    }
    let closes = candles.closes();
    let labels = &labeled.labels;
    let returns = &labeled.returns.returns;
    let rows = (w - 1..labels.len())
        .into_par_iter()
        .map(|t| FeatureRow {
            t,
            features: window_features(&closes, labels, t, opts),
            target: labels[t],
            next_return: returns[t],
        })
        .collect();
    Ok(FeatureMatrix {
        market_id: candles.market_id().to_string(),
        window_length: w,
        rows,
    })
}

/// Column-wise z-score map. Zero-variance columns are centred only.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "cannot standardise an empty matrix");
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut means = vec![0.0; d];
        for r in rows {
            for (m, v) in means.iter_mut().zip(r) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut vars = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in vars.iter_mut().zip(r).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        let scales = vars
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { means, scales }
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn transform(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform_row(r)).collect()
    }
}
