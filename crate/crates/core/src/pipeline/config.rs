use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::emd::{Component, EmdConfig, MIN_SIGNAL_LEN};
use crate::features::DEFAULT_WINDOW;
use crate::gmm::GmmConfig;
use crate::learners::{Hyperparameters, LearnerKind};
use crate::market_data::DEFAULT_QUANTILE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSource {
    pub id: String,
    /// Candle file; relative paths resolve against the config file's directory.
    pub path: PathBuf,
    /// Evaluation horizon. Candles stamped later are dropped on load.
    #[serde(default)]
    pub end_timestamp: Option<i64>,
}

/// Mixture filtering options. Same knobs as [`GmmConfig`] minus the seed,
/// which is derived from the global seed per market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmSection {
    pub enabled: bool,
    /// Also run the unfiltered matrix as cluster `all` when filtering.
    pub include_unfiltered: bool,
    pub g_min: usize,
    pub g_max: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub restarts: usize,
    pub ridge: f64,
    pub min_cluster_size: Option<usize>,
}

impl Default for GmmSection {
    fn default() -> Self {
        let d = GmmConfig::default();
        GmmSection {
            enabled: true,
            include_unfiltered: false,
            g_min: d.g_min,
            g_max: d.g_max,
            tol: d.tol,
            max_iters: d.max_iters,
            restarts: d.restarts,
            ridge: d.ridge,
            min_cluster_size: d.min_cluster_size,
        }
    }
}

impl GmmSection {
    pub fn to_config(&self, seed: u64) -> GmmConfig {
        GmmConfig {
            g_min: self.g_min,
            g_max: self.g_max,
            tol: self.tol,
            max_iters: self.max_iters,
            restarts: self.restarts,
            ridge: self.ridge,
            seed,
            min_cluster_size: self.min_cluster_size,
        }
    }
}

/// Switches that trade fidelity to the batch design for strict causality.
/// All off reproduces the batch design, which is reported as look-ahead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeakageFlags {
    /// Label thresholds from returns up to the end of each fraction's training period.
    pub causal_thresholds: bool,
    /// Fit the mixture on training-period rows only.
    pub causal_gmm: bool,
    /// Decompose the training segment alone and score test rows from trailing windows.
    pub causal_emd: bool,
    /// Trailing window length used for test rows under `causal_emd`.
    pub causal_emd_window: usize,
    pub include_window_end_label: bool,
}

impl Default for LeakageFlags {
    fn default() -> Self {
        LeakageFlags {
            causal_thresholds: false,
            causal_gmm: false,
            causal_emd: false,
            causal_emd_window: 128,
            include_window_end_label: false,
        }
    }
}

impl LeakageFlags {
    pub fn any_look_ahead(&self, gmm_enabled: bool) -> bool {
        !self.causal_thresholds || !self.causal_emd || (gmm_enabled && !self.causal_gmm) || self.include_window_end_label
    }
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}
fn default_quantile() -> f64 {
    DEFAULT_QUANTILE
}
fn default_fractions() -> Vec<f64> {
    vec![0.2, 0.3, 0.4]
}
fn default_replicates() -> usize {
    crate::backtest::DEFAULT_REPLICATES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub markets: Vec<MarketSource>,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    #[serde(default)]
    pub gmm: GmmSection,
    #[serde(default)]
    pub emd: EmdConfig,
    pub learners: Vec<Hyperparameters>,
    #[serde(default = "default_fractions")]
    pub test_fractions: Vec<f64>,
    #[serde(default = "default_replicates")]
    pub baseline_replicates: usize,
    /// Deducted from every non-Hold decision.
    #[serde(default)]
    pub cost_per_trade: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub leakage: LeakageFlags,
}

impl ExperimentConfig {
    /// Parses TOML text. Relative market paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        for m in &mut cfg.markets {
            if m.path.is_relative() {
                m.path = base_dir.join(&m.path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.markets.is_empty() {
            return bad("at least one market is required".into());
        }
        let mut ids = BTreeSet::new();
        for m in &self.markets {
            let safe = !m.id.is_empty()
                && m.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
            if !safe {
                return bad(format!(
                    "market id `{}` must be non-empty ASCII letters, digits, `-`, `_` or `.`",
                    m.id
                ));
            }
            if !ids.insert(&m.id) {
                return bad(format!("duplicate market id `{}`", m.id));
            }
        }
        if self.learners.is_empty() {
            return bad("at least one learner is required".into());
        }
        let mut kinds = BTreeSet::new();
        for l in &self.learners {
            l.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
            if !kinds.insert(l.kind()) {
                return bad(format!("learner `{}` is listed twice", l.kind().name()));
            }
        }
        if self.test_fractions.is_empty() {
            return bad("at least one test fraction is required".into());
        }
        for (i, f) in self.test_fractions.iter().enumerate() {
            if !(*f > 0.0 && *f < 1.0) {
                return bad(format!("test fraction {f} is outside (0, 1)"));
            }
            if self.test_fractions[..i].contains(f) {
                return bad(format!("test fraction {f} is listed twice"));
            }
        }
        if self.window < 3 {
            return bad(format!("window must be at least 3, got {}", self.window));
        }
        if !(self.quantile > 0.0 && self.quantile < 0.5) {
            return bad(format!("quantile must lie in (0, 0.5), got {}", self.quantile));
        }
        if self.baseline_replicates < 100 {
            return bad(format!(
                "baseline_replicates must be at least 100, got {}",
                self.baseline_replicates
            ));
        }
        if !(self.cost_per_trade.is_finite() && self.cost_per_trade >= 0.0) {
            return bad("cost_per_trade must be a non-negative number".into());
        }
        if self.leakage.causal_emd_window < MIN_SIGNAL_LEN {
            return bad(format!(
                "leakage.causal_emd_window must be at least {MIN_SIGNAL_LEN}"
            ));
        }
        self.emd
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.gmm
            .to_config(0)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn learner_kinds(&self) -> Vec<LearnerKind> {
        self.learners.iter().map(Hyperparameters::kind).collect()
    }
}

/// Feature matrix a learner is trained on: the raw features or one of the
/// four stochasticity components of every feature column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Raw,
    High,
    Medium,
    Low,
    Trend,
}

impl Source {
    pub const ALL: [Source; 5] = [Source::Raw, Source::High, Source::Medium, Source::Low, Source::Trend];

    pub fn name(self) -> &'static str {
        match self {
            Source::Raw => "raw",
            Source::High => "high",
            Source::Medium => "medium",
            Source::Low => "low",
            Source::Trend => "trend",
        }
    }

    pub fn component(self) -> Option<Component> {
        match self {
            Source::Raw => None,
            Source::High => Some(Component::High),
            Source::Medium => Some(Component::Medium),
            Source::Low => Some(Component::Low),
            Source::Trend => Some(Component::Trend),
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Source {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Source::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown source `{s}`"))
    }
}

/// Row subset a cell trains on: everything, or one mixture cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClusterKey {
    All,
    Cluster(usize),
}

impl fmt::Display for ClusterKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterKey::All => f.write_str("all"),
            ClusterKey::Cluster(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for ClusterKey {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(ClusterKey::All);
        }
        s.parse()
            .map(ClusterKey::Cluster)
            .map_err(|_| format!("cluster must be `all` or an index, got `{s}`"))
    }
}

fn parse_learner(s: &str) -> Result<LearnerKind, String> {
    [
        LearnerKind::Knn,
        LearnerKind::RandomForest,
        LearnerKind::GradientBoost,
        LearnerKind::RandomBaseline,
    ]
    .into_iter()
    .find(|k| k.name() == s)
    .ok_or_else(|| format!("unknown learner `{s}`"))
}

/// Restricts a run to the grid cells matching every given coordinate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellFilter {
    pub market: Option<String>,
    pub cluster: Option<ClusterKey>,
    pub source: Option<Source>,
    pub learner: Option<LearnerKind>,
    pub fraction: Option<f64>,
}

impl CellFilter {
    pub fn matches_market(&self, id: &str) -> bool {
        self.market.as_deref().is_none_or(|m| m == id)
    }
    pub fn matches_cluster(&self, c: ClusterKey) -> bool {
        self.cluster.is_none_or(|x| x == c)
    }
    pub fn matches_source(&self, s: Source) -> bool {
        self.source.is_none_or(|x| x == s)
    }
    pub fn matches_learner(&self, k: LearnerKind) -> bool {
        self.learner.is_none_or(|x| x == k)
    }
    pub fn matches_fraction(&self, f: f64) -> bool {
        self.fraction.is_none_or(|x| x == f)
    }
}

impl FromStr for CellFilter {
    type Err = String;

    /// `market=x,cluster=0,source=high,learner=knn,fraction=0.2`, any subset.
    fn from_str(s: &str) -> Result<Self, String> {
        let mut f = CellFilter::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{part}`"))?;
            let v = v.trim();
            match k.trim() {
                "market" => f.market = Some(v.to_string()),
                "cluster" => f.cluster = Some(v.parse()?),
                "source" => f.source = Some(v.parse()?),
                "learner" => f.learner = Some(parse_learner(v)?),
                "fraction" => {
                    f.fraction = Some(v.parse().map_err(|_| format!("bad fraction `{v}`"))?)
                }
                other => return Err(format!("unknown filter key `{other}`")),
            }
        }
        Ok(f)
    }
}
