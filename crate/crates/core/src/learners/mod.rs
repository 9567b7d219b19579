//! Classifiers compared on each feature source: k-nearest neighbours, a
//! Gini random forest, softmax gradient boosting, and the uniform random
//! baseline.

mod boost;
mod forest;
mod knn;
pub mod tree;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::DecisionLabel;
use crate::seeding::rng_from;

pub use boost::BoostModel;
pub use forest::ForestModel;
pub use knn::KnnModel;

#[derive(Debug, Error, PartialEq)]
pub enum LearnerError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("{kind} needs at least 2 training rows, got {n}")]
    TooFewRows { kind: LearnerKind, n: usize },
    #[error("training rows and labels differ in length ({rows} vs {labels})")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("row {row} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Knn,
    RandomForest,
    GradientBoost,
    RandomBaseline,
}

impl LearnerKind {
    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Knn => "knn",
            LearnerKind::RandomForest => "random_forest",
            LearnerKind::GradientBoost => "gradient_boost",
            LearnerKind::RandomBaseline => "random_baseline",
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_k() -> usize {
    5
}
fn default_trees() -> usize {
    300
}
fn default_min_leaf() -> usize {
    1
}
fn default_rounds() -> usize {
    200
}
fn default_learning_rate() -> f64 {
    0.1
}
fn default_boost_depth() -> usize {
    3
}
fn default_subsample() -> f64 {
    1.0
}

/// Kind plus kind-specific hyperparameters. Deserialises from a table
/// tagged by `kind`, e.g. `{ kind = "knn", k = 7 }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Hyperparameters {
    Knn {
        #[serde(default = "default_k")]
        k: usize,
    },
    RandomForest {
        #[serde(default = "default_trees")]
        n_trees: usize,
        /// Features tried per split; `floor(sqrt(d))` when unset.
        #[serde(default)]
        mtry: Option<usize>,
        #[serde(default = "default_min_leaf")]
        min_leaf: usize,
        #[serde(default)]
        max_depth: Option<usize>,
    },
    GradientBoost {
        #[serde(default = "default_rounds")]
        rounds: usize,
        #[serde(default = "default_learning_rate")]
        learning_rate: f64,
        #[serde(default = "default_boost_depth")]
        max_depth: usize,
        #[serde(default = "default_subsample")]
        subsample: f64,
    },
    RandomBaseline,
}

impl Hyperparameters {
    pub fn default_for(kind: LearnerKind) -> Self {
        match kind {
            LearnerKind::Knn => Hyperparameters::Knn { k: default_k() },
            LearnerKind::RandomForest => Hyperparameters::RandomForest {
                n_trees: default_trees(),
                mtry: None,
                min_leaf: default_min_leaf(),
                max_depth: None,
            },
            LearnerKind::GradientBoost => Hyperparameters::GradientBoost {
                rounds: default_rounds(),
                learning_rate: default_learning_rate(),
                max_depth: default_boost_depth(),
                subsample: default_subsample(),
            },
            LearnerKind::RandomBaseline => Hyperparameters::RandomBaseline,
        }
    }

    pub fn kind(&self) -> LearnerKind {
        match self {
            Hyperparameters::Knn { .. } => LearnerKind::Knn,
            Hyperparameters::RandomForest { .. } => LearnerKind::RandomForest,
            Hyperparameters::GradientBoost { .. } => LearnerKind::GradientBoost,
            Hyperparameters::RandomBaseline => LearnerKind::RandomBaseline,
        }
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::InvalidHyperparameter(m.to_string()));
        match *self {
            Hyperparameters::Knn { k } if k == 0 => bad("knn k must be at least 1"),
            Hyperparameters::RandomForest {
                n_trees,
                mtry,
                min_leaf,
                max_depth,
            } if n_trees == 0 || mtry == Some(0) || min_leaf == 0 || max_depth == Some(0) => {
                bad("random forest sizes must be positive")
            }
            Hyperparameters::GradientBoost {
                learning_rate,
                max_depth,
                subsample,
                ..
            } if !(learning_rate > 0.0) || max_depth == 0 || !(subsample > 0.0 && subsample <= 1.0) => {
                bad("gradient boost needs learning_rate > 0, max_depth >= 1 and subsample in (0, 1]")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnerSpec {
    pub params: Hyperparameters,
    pub seed: u64,
}

impl LearnerSpec {
    pub fn new(params: Hyperparameters, seed: u64) -> Self {
        Self { params, seed }
    }

    pub fn default_for(kind: LearnerKind, seed: u64) -> Self {
        Self::new(Hyperparameters::default_for(kind), seed)
    }

    pub fn kind(&self) -> LearnerKind {
        self.params.kind()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub n: usize,
    pub d: usize,
    /// Indexed by label code.
    pub class_counts: [usize; 3],
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedState {
    Knn(KnnModel),
    Forest(ForestModel),
    Boost(BoostModel),
    Baseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub spec: LearnerSpec,
    pub state: FittedState,
    pub meta: TrainingMeta,
}

fn check_rows(rows: &[Vec<f64>], d: usize) -> Result<(), LearnerError> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(LearnerError::DimensionMismatch {
                row: i,
                expected: d,
                got: r.len(),
            });
        }
    }
    Ok(())
}

/// Fits `spec` on standardized rows. Deterministic in `(spec, x, y)`.
pub fn train(
    spec: &LearnerSpec,
    x: &[Vec<f64>],
    y: &[DecisionLabel],
) -> Result<TrainedModel, LearnerError> {
    spec.params.validate()?;
    if x.is_empty() {
        return Err(LearnerError::EmptyTrainingSet);
    }
    if x.len() != y.len() {
        return Err(LearnerError::LengthMismatch {
            rows: x.len(),
            labels: y.len(),
        });
    }
    let kind = spec.kind();
    if kind != LearnerKind::RandomBaseline && x.len() < 2 {
        return Err(LearnerError::TooFewRows { kind, n: x.len() });
    }
    let d = x[0].len();
    check_rows(x, d)?;

    let mut class_counts = [0usize; 3];
    for l in y {
        class_counts[l.index()] += 1;
    }
    let warning = (class_counts.iter().filter(|&&c| c > 0).count() == 1)
        .then(|| "training set contains a single class".to_string());

    let codes: Vec<u8> = y.iter().map(|l| l.code()).collect();
    let state = match spec.params {
        Hyperparameters::Knn { k } => FittedState::Knn(KnnModel::fit(x, &codes, k)),
        Hyperparameters::RandomForest {
            n_trees,
            mtry,
            min_leaf,
            max_depth,
        } => FittedState::Forest(ForestModel::fit(
            x,
            &codes,
            forest::ForestParams {
                n_trees,
                mtry: mtry.unwrap_or(((d as f64).sqrt().floor() as usize).max(1)),
                min_leaf,
                max_depth,
            },
            spec.seed,
        )),
        Hyperparameters::GradientBoost {
            rounds,
            learning_rate,
            max_depth,
            subsample,
        } => FittedState::Boost(BoostModel::fit(
            x,
            &codes,
            boost::BoostParams {
                rounds,
                learning_rate,
                max_depth,
                subsample,
            },
            spec.seed,
        )),
        Hyperparameters::RandomBaseline => FittedState::Baseline,
    };
    Ok(TrainedModel {
        spec: spec.clone(),
        state,
        meta: TrainingMeta {
            n: x.len(),
            d,
            class_counts,
            warning,
        },
    })
}

/// One decision per row of `x`.
pub fn predict(model: &TrainedModel, x: &[Vec<f64>]) -> Result<Vec<DecisionLabel>, LearnerError> {
    check_rows(x, model.meta.d)?;
    let codes: Vec<u8> = match &model.state {
        FittedState::Knn(m) => x.iter().map(|r| m.predict(r)).collect(),
        FittedState::Forest(m) => x.iter().map(|r| m.predict(r)).collect(),
        FittedState::Boost(m) => x.iter().map(|r| m.predict(r)).collect(),
        FittedState::Baseline => return Ok(random_policy(x.len(), model.spec.seed)),
    };
    Ok(codes
        .into_iter()
        .map(|c| DecisionLabel::from_code(c).expect("learners emit codes 0..=2"))
        .collect())
}

/// I.i.d. uniform decisions from a seeded generator.
pub fn random_policy(n: usize, seed: u64) -> Vec<DecisionLabel> {
    let mut rng = rng_from(seed);
    (0..n)
        .map(|_| DecisionLabel::ALL[rng.random_range(0..3)])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::DecisionLabel::{Buy, Hold, Sell};

    /// Three classes separated along the first axis with a noisy second axis.
    fn separable(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<DecisionLabel>) {
        let mut rng = rng_from(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let class = i % 3;
            let base = class as f64 * 3.0;
            x.push(vec![
                base + rng.random::<f64>(),
                rng.random::<f64>() * 5.0,
                rng.random::<f64>(),
            ]);
            y.push(DecisionLabel::ALL[class]);
        }
        (x, y)
    }

    fn accuracy(model: &TrainedModel, x: &[Vec<f64>], y: &[DecisionLabel]) -> f64 {
        let p = predict(model, x).unwrap();
        p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
    }

    #[test]
    fn forest_fits_separable_data() {
        let (x, y) = separable(200, 1);
        let m = train(&LearnerSpec::default_for(LearnerKind::RandomForest, 3), &x, &y).unwrap();
        assert!(accuracy(&m, &x, &y) >= 0.95);
    }

    #[test]
    fn boosting_fits_separable_data() {
        let (x, y) = separable(200, 2);
        let m = train(&LearnerSpec::default_for(LearnerKind::GradientBoost, 3), &x, &y).unwrap();
        assert!(accuracy(&m, &x, &y) >= 0.95);
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = separable(120, 4);
        let (probe, _) = separable(40, 5);
        for kind in [
            LearnerKind::Knn,
            LearnerKind::RandomForest,
            LearnerKind::GradientBoost,
            LearnerKind::RandomBaseline,
        ] {
            let spec = LearnerSpec::default_for(kind, 11);
            let a = predict(&train(&spec, &x, &y).unwrap(), &probe).unwrap();
            let b = predict(&train(&spec, &x, &y).unwrap(), &probe).unwrap();
            assert_eq!(a, b, "{kind}");
        }
    }

    #[test]
    fn zero_rounds_predicts_majority() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y = vec![Hold, Hold, Buy, Hold, Sell, Hold, Buy, Hold, Hold, Sell];
        let spec = LearnerSpec::new(
            Hyperparameters::GradientBoost {
                rounds: 0,
                learning_rate: 0.1,
                max_depth: 3,
                subsample: 1.0,
            },
            0,
        );
        let m = train(&spec, &x, &y).unwrap();
        assert!(predict(&m, &x).unwrap().iter().all(|&l| l == Hold));
    }

    #[test]
    fn single_class_training() {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let y = vec![Sell; 12];
        let probe: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 * 0.7 - 3.0, 1.0]).collect();
        for kind in [LearnerKind::Knn, LearnerKind::RandomForest, LearnerKind::GradientBoost] {
            let m = train(&LearnerSpec::default_for(kind, 1), &x, &y).unwrap();
            assert!(m.meta.warning.is_some());
            assert!(predict(&m, &probe).unwrap().iter().all(|&l| l == Sell), "{kind}");
        }
    }

    #[test]
    fn error_paths() {
        let spec = LearnerSpec::default_for(LearnerKind::Knn, 0);
        assert_eq!(train(&spec, &[], &[]), Err(LearnerError::EmptyTrainingSet));
        assert!(matches!(
            train(&spec, &[vec![1.0]], &[Buy]),
            Err(LearnerError::TooFewRows { .. })
        ));
        let m = train(&spec, &[vec![1.0], vec![2.0]], &[Buy, Sell]).unwrap();
        assert!(matches!(
            predict(&m, &[vec![1.0, 2.0]]),
            Err(LearnerError::DimensionMismatch { .. })
        ));
        let bad = LearnerSpec::new(Hyperparameters::Knn { k: 0 }, 0);
        assert!(matches!(
            train(&bad, &[vec![1.0], vec![2.0]], &[Buy, Sell]),
            Err(LearnerError::InvalidHyperparameter(_))
        ));
    }

    #[test]
    fn random_policy_frequencies() {
        let d = random_policy(30_000, 17);
        let mut counts = [0usize; 3];
        for l in &d {
            counts[l.index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
        }
        assert_eq!(random_policy(500, 3), random_policy(500, 3));
        assert_ne!(random_policy(50, 1), random_policy(50, 2));
    }

    #[test]
    fn hyperparameters_parse_from_tagged_tables() {
        let h: Hyperparameters = toml::from_str("kind = \"knn\"\nk = 7\n").unwrap();
        assert_eq!(h, Hyperparameters::Knn { k: 7 });
        let h: Hyperparameters = toml::from_str("kind = \"random_forest\"").unwrap();
        assert_eq!(h, Hyperparameters::default_for(LearnerKind::RandomForest));
        assert!(toml::from_str::<Hyperparameters>("kind = \"knn\"\nkk = 7\n").is_err());
    }
}
