pub mod backtest;
pub mod emd;
pub mod features;
pub mod gmm;
pub mod market_data;
pub mod pipeline;
pub mod seeding;
pub mod synth;
pub mod learners;
