//! Optimization, evaluation metrics and the training loop.

mod adam;
pub mod metrics;
mod trainer;

pub use adam::{Adam, LinearSchedule};
pub use metrics::EvalReport;
pub use trainer::{evaluate, score_impressions, train, MetricsRow, ScoredImpression, TrainConfig, TrainOutcome, METRICS_HEADER};
