//! Synthetic candle markets with a planted, tunable predictable regime.
//!
//! Log returns are Gaussian noise plus occasional two-step events. A free
//! step starts an event with probability `trigger_prob`: its return is a
//! jump of `trigger_size` with a fair random sign. The following step is
//! a forced continuation of `continuation_size` whose sign repeats the
//! trigger's with probability `(1 + signal_to_noise) / 2`. Continuations
//! never trigger. The trigger is visible to the feature extractor as the
//! most recent log return, so the next-hour drift sign is a function of
//! that feature when `signal_to_noise = 1` and independent of it at 0.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{Candle, CandleSeries, MarketDataError};
use crate::seeding::rng_from;

pub const MIN_SYNTH_LEN: usize = 200;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic market parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Candles(#[from] MarketDataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub market_id: String,
    /// Number of candles.
    pub length: usize,
    pub start_price: f64,
    pub start_timestamp: i64,
    pub interval_secs: i64,
    /// Standard deviation of the per-step Gaussian log-return noise.
    pub noise_sigma: f64,
    pub trigger_prob: f64,
    /// Absolute log-return size of a trigger jump.
    pub trigger_size: f64,
    /// Absolute log-return size of the continuation after a trigger.
    pub continuation_size: f64,
    /// 0 makes continuation signs a coin flip, 1 makes them follow the trigger.
    pub signal_to_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            market_id: "synthetic".to_string(),
            length: 2000,
            start_price: 100.0,
            start_timestamp: 0,
            interval_secs: 3600,
            noise_sigma: 0.002,
            trigger_prob: 0.03,
            trigger_size: 0.01,
            continuation_size: 0.02,
            signal_to_noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Invalid(m.to_string()));
        if self.length < MIN_SYNTH_LEN {
            return bad(&format!("length must be at least {MIN_SYNTH_LEN}, got {}", self.length));
        }
        if !(self.start_price.is_finite() && self.start_price > 0.0) {
            return bad("start_price must be positive");
        }
        if self.interval_secs <= 0 {
            return bad("interval_secs must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.trigger_prob) {
            return bad("trigger_prob must lie in [0, 1]");
        }
        if !(self.trigger_size.is_finite() && self.trigger_size >= 0.0)
            || !(self.continuation_size.is_finite() && self.continuation_size >= 0.0)
        {
            return bad("event sizes must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.signal_to_noise) {
            return bad("signal_to_noise must lie in [0, 1]");
        }
        Ok(())
    }

    /// Long-run fraction of steps that are forced continuations.
    pub fn continuation_rate(&self) -> f64 {
        self.trigger_prob / (1.0 + self.trigger_prob)
    }

    /// Expected APC per step of the Bayes-optimal policy: follow the last
    /// trigger on continuation steps, and nothing else is predictable.
    pub fn bayes_apc_per_step(&self) -> f64 {
        self.continuation_size * self.signal_to_noise * self.continuation_rate()
    }
}

/// Per-step event kind, exposed for tests and oracles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Free,
    Trigger,
    Continuation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthMarket {
    pub series: CandleSeries,
    /// `returns[i] = ln(close[i+1] / close[i])`.
    pub returns: Vec<f64>,
    pub kinds: Vec<StepKind>,
}

pub fn synth_market(spec: &SynthSpec) -> Result<SynthMarket, SynthError> {
    spec.validate()?;
    let mut rng = rng_from(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| SynthError::Invalid(e.to_string()))?;
    let wick = Normal::new(0.0, spec.noise_sigma * 0.5).map_err(|e| SynthError::Invalid(e.to_string()))?;

    let steps = spec.length - 1;
    let mut returns = Vec::with_capacity(steps);
    let mut kinds = Vec::with_capacity(steps);
    let mut pending: Option<f64> = None;
    for _ in 0..steps {
        let eps = noise.sample(&mut rng);
        match pending.take() {
            Some(sign) => {
                let follow = rng.random::<f64>() < (1.0 + spec.signal_to_noise) / 2.0;
                let s = if follow { sign } else { -sign };
                returns.push(s * spec.continuation_size + eps);
                kinds.push(StepKind::Continuation);
            }
            None if rng.random::<f64>() < spec.trigger_prob => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                returns.push(sign * spec.trigger_size + eps);
                kinds.push(StepKind::Trigger);
                pending = Some(sign);
            }
            None => {
                returns.push(eps);
                kinds.push(StepKind::Free);
            }
        }
    }

    let mut candles = Vec::with_capacity(spec.length);
    let mut close = spec.start_price;
    candles.push(candle(spec.start_timestamp, close, close, &wick, &mut rng));
    for (i, r) in returns.iter().enumerate() {
        let open = close;
        close = open * r.exp();
        let ts = spec.start_timestamp + (i as i64 + 1) * spec.interval_secs;
        candles.push(candle(ts, open, close, &wick, &mut rng));
    }
    let series = CandleSeries::new(spec.market_id.clone(), candles)?;
    Ok(SynthMarket {
        series,
        returns,
        kinds,
    })
}

fn candle<R: Rng>(timestamp: i64, open: f64, close: f64, wick: &Normal<f64>, rng: &mut R) -> Candle {
    let up = wick.sample(rng).abs();
    let down = wick.sample(rng).abs();
    Candle {
        timestamp,
        open,
        high: open.max(close) * (1.0 + up),
        low: open.min(close) * (1.0 - down),
        close,
        volume: 1000.0 * (1.0 + rng.random::<f64>()),
    }
}
