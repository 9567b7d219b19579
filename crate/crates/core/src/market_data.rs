//! Candle loading, log returns and quantile-threshold decision labels.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Header expected on every candle file.
pub const CANDLE_HEADER: [&str; 6] = ["timestamp", "open", "high", "low", "close", "volume"];

/// Default tail fraction for the Buy/Sell thresholds.
pub const DEFAULT_QUANTILE: f64 = 0.035;

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: timestamp {timestamp} does not increase on previous {previous}")]
    NonIncreasingTimestamp {
        line: u64,
        timestamp: i64,
        previous: i64,
    },
    #[error("line {line}: close must be strictly positive, got {close}")]
    NonPositiveClose { line: u64, close: f64 },
    #[error("line {line}: {message}")]
    InvalidCandle { line: u64, message: String },
    #[error("candle series needs at least 2 candles, got {0}")]
    TooShort(usize),
    #[error("empty return series")]
    EmptyReturns,
    #[error("quantile fraction must lie in (0, 0.5), got {0}")]
    InvalidQuantile(f64),
    #[error("lower threshold {lower} exceeds upper threshold {upper}")]
    InvertedThresholds { lower: f64, upper: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candle {
    pub timestamp: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Candle {
    fn check(&self) -> Result<(), String> {
        let fields = [self.open, self.high, self.low, self.close, self.volume];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err("non-finite field".into());
        }
        let body_lo = self.open.min(self.close);
        let body_hi = self.open.max(self.close);
        if self.low > body_lo || body_hi > self.high {
            return Err(format!(
                "price range violated: low {} open {} close {} high {}",
                self.low, self.open, self.close, self.high
            ));
        }
        if self.volume < 0.0 {
            return Err(format!("negative volume {}", self.volume));
        }
        Ok(())
    }
}

/// Time-ordered candles for one market.
#[derive(Debug, Clone, PartialEq)]
pub struct CandleSeries {
    market_id: String,
    candles: Vec<Candle>,
}

impl CandleSeries {
    /// Validates ordering, positivity and the OHLC range of every candle.
    /// Error line numbers count the header as line 1.
    pub fn new(market_id: impl Into<String>, candles: Vec<Candle>) -> Result<Self, MarketDataError> {
        if candles.len() < 2 {
            return Err(MarketDataError::TooShort(candles.len()));
        }
        for (i, c) in candles.iter().enumerate() {
            let line = i as u64 + 2;
            if !(c.close > 0.0) {
                return Err(MarketDataError::NonPositiveClose { line, close: c.close });
            }
            c.check()
                .map_err(|message| MarketDataError::InvalidCandle { line, message })?;
            if i > 0 && c.timestamp <= candles[i - 1].timestamp {
                return Err(MarketDataError::NonIncreasingTimestamp {
                    line,
                    timestamp: c.timestamp,
                    previous: candles[i - 1].timestamp,
                });
            }
        }
        Ok(Self {
            market_id: market_id.into(),
            candles,
        })
    }

    /// Builds a series from closes alone (open = previous close, tight wicks).
    /// Timestamps are hourly from zero.
    pub fn from_closes(
        market_id: impl Into<String>,
        closes: &[f64],
    ) -> Result<Self, MarketDataError> {
        let candles = closes
            .iter()
            .enumerate()
            .map(|(i, &close)| {
                let open = if i == 0 { close } else { closes[i - 1] };
                Candle {
                    timestamp: i as i64 * 3600,
                    open,
                    high: open.max(close),
                    low: open.min(close),
                    close,
                    volume: 0.0,
                }
            })
            .collect();
        Self::new(market_id, candles)
    }

    pub fn market_id(&self) -> &str {
        &self.market_id
    }

    pub fn candles(&self) -> &[Candle] {
        &self.candles
    }

    pub fn len(&self) -> usize {
        self.candles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candles.is_empty()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.candles.iter().map(|c| c.close).collect()
    }

    /// Number of consecutive pairs more than one hour apart.
    pub fn gap_count(&self) -> usize {
        self.candles
            .windows(2)
            .filter(|w| w[1].timestamp - w[0].timestamp > 3600)
            .count()
    }

    /// Drops every candle stamped after `end`. Fails if fewer than two remain.
    pub fn truncate_after(self, end: i64) -> Result<Self, MarketDataError> {
        let Self {
            market_id,
            mut candles,
        } = self;
        candles.retain(|c| c.timestamp <= end);
        if candles.len() < 2 {
            return Err(MarketDataError::TooShort(candles.len()));
        }
        Ok(Self { market_id, candles })
    }
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    line: u64,
) -> Result<T, MarketDataError> {
    let raw = record.get(idx).ok_or_else(|| MarketDataError::Malformed {
        line,
        message: format!("missing column `{}`", CANDLE_HEADER[idx]),
    })?;
    raw.trim().parse().map_err(|_| MarketDataError::Malformed {
        line,
        message: format!("cannot parse `{}` as {}", raw, CANDLE_HEADER[idx]),
    })
}

/// Reads a `timestamp,open,high,low,close,volume` file. Rows are validated in
/// file order; nothing is re-sorted.
pub fn load_candles(path: &Path, market_id: &str) -> Result<CandleSeries, MarketDataError> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| MarketDataError::Io {
        path: display.clone(),
        source,
    })?;
    read_candles(file, market_id)
}

pub fn read_candles<R: std::io::Read>(
    reader: R,
    market_id: &str,
) -> Result<CandleSeries, MarketDataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| MarketDataError::Malformed {
        line: 1,
        message: e.to_string(),
    })?;
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != CANDLE_HEADER {
        return Err(MarketDataError::Malformed {
            line: 1,
            message: format!("expected header `{}`", CANDLE_HEADER.join(",")),
        });
    }

    let mut candles = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| MarketDataError::Malformed {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != CANDLE_HEADER.len() {
            return Err(MarketDataError::Malformed {
                line,
                message: format!("expected 6 fields, found {}", record.len()),
            });
        }
        let candle = Candle {
            timestamp: parse_field(&record, 0, line)?,
            open: parse_field(&record, 1, line)?,
            high: parse_field(&record, 2, line)?,
            low: parse_field(&record, 3, line)?,
            close: parse_field(&record, 4, line)?,
            volume: parse_field(&record, 5, line)?,
        };
        if !(candle.close > 0.0) {
            return Err(MarketDataError::NonPositiveClose {
                line,
                close: candle.close,
            });
        }
        candle
            .check()
            .map_err(|message| MarketDataError::InvalidCandle { line, message })?;
        if let Some(prev) = candles.last().map(|c: &Candle| c.timestamp) {
            if candle.timestamp <= prev {
                return Err(MarketDataError::NonIncreasingTimestamp {
                    line,
                    timestamp: candle.timestamp,
                    previous: prev,
                });
            }
        }
        candles.push(candle);
    }
    CandleSeries::new(market_id, candles)
}

/// Writes candles in the same schema `load_candles` reads.
pub fn write_candles<W: std::io::Write>(series: &CandleSeries, out: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(CANDLE_HEADER)?;
    for c in series.candles() {
        wtr.write_record([
            c.timestamp.to_string(),
            c.open.to_string(),
            c.high.to_string(),
            c.low.to_string(),
            c.close.to_string(),
            c.volume.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Log returns between consecutive stored candles.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    pub returns: Vec<f64>,
    /// Offset of `returns[0]` into the candle series.
    pub aligned_index: usize,
}

impl ReturnSeries {
    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }
}

/// `returns[t] = ln(close[t+1] / close[t])`. Wall-clock gaps are ignored.
pub fn log_returns(series: &CandleSeries) -> ReturnSeries {
    let returns = series
        .candles()
        .windows(2)
        .map(|w| (w[1].close / w[0].close).ln())
        .collect();
    ReturnSeries {
        returns,
        aligned_index: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum DecisionLabel {
    Sell = 0,
    Hold = 1,
    Buy = 2,
}

impl DecisionLabel {
    pub const ALL: [DecisionLabel; 3] = [DecisionLabel::Sell, DecisionLabel::Hold, DecisionLabel::Buy];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DecisionLabel::Sell),
            1 => Some(DecisionLabel::Hold),
            2 => Some(DecisionLabel::Buy),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DecisionLabel::Sell => "sell",
            DecisionLabel::Hold => "hold",
            DecisionLabel::Buy => "buy",
        }
    }

    /// Buy and Sell swap, Hold is fixed.
    pub fn flipped(self) -> Self {
        match self {
            DecisionLabel::Sell => DecisionLabel::Buy,
            DecisionLabel::Hold => DecisionLabel::Hold,
            DecisionLabel::Buy => DecisionLabel::Sell,
        }
    }
}

impl fmt::Display for DecisionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries {
    pub returns: ReturnSeries,
    pub labels: Vec<DecisionLabel>,
    pub lower_threshold: f64,
    pub upper_threshold: f64,
}

impl LabeledSeries {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Counts in code order: `[sell, hold, buy]`.
    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for l in &self.labels {
            counts[l.index()] += 1;
        }
        counts
    }
}

/// Linear-interpolation quantile of already sorted data: `h = (n-1)p`,
/// `x[floor h] + (h - floor h)(x[floor h + 1] - x[floor h])`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    if frac == 0.0 {
        return sorted[lo];
    }
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Sorts a copy and evaluates [`quantile_sorted`].
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, p)
}

/// Lower/upper thresholds at `q` and `1 - q`.
pub fn quantile_thresholds(returns: &[f64], q: f64) -> Result<(f64, f64), MarketDataError> {
    if returns.is_empty() {
        return Err(MarketDataError::EmptyReturns);
    }
    if !(q > 0.0 && q < 0.5) {
        return Err(MarketDataError::InvalidQuantile(q));
    }
    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((quantile_sorted(&sorted, q), quantile_sorted(&sorted, 1.0 - q)))
}

/// Strict comparisons on both sides; equality with a threshold is Hold.
pub fn label_return(omega: f64, lower: f64, upper: f64) -> DecisionLabel {
    if omega < lower {
        DecisionLabel::Sell
    } else if omega > upper {
        DecisionLabel::Buy
    } else {
        DecisionLabel::Hold
    }
}

pub fn label_decisions(
    returns: ReturnSeries,
    lower: f64,
    upper: f64,
) -> Result<LabeledSeries, MarketDataError> {
    if lower > upper {
        return Err(MarketDataError::InvertedThresholds { lower, upper });
    }
    let labels = returns
        .returns
        .iter()
        .map(|&w| label_return(w, lower, upper))
        .collect();
    Ok(LabeledSeries {
        returns,
        labels,
        lower_threshold: lower,
        upper_threshold: upper,
    })
}
