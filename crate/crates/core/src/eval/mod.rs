//! Accuracy, pristine / falsified per-class accuracy, AUC and comparison
//! reports.

mod auc;
mod metrics;
mod report;

use thiserror::Error;

pub use auc::auc;
pub use metrics::{
    read_predictions, score_predictions, write_predictions, MetricsReport, Predicted,
    PredictionRecord, ReportMeta, SystemRole,
};
pub use report::{
    compare_report, BaselineSplit, BaselineTable, ColumnMetrics, Comparison, ComparisonRow,
    SystemMetrics, DEFAULT_BASELINES, DEFAULT_GAIN_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction records")]
    Empty,
    #[error("{scored} of {total} records carry a score; scores must be on all or none")]
    MixedScores { scored: usize, total: usize },
    #[error("invalid score: {0}")]
    InvalidScore(String),
    #[error("AUC needs both matched and mismatched records")]
    SingleClass,
    #[error("line {line}: malformed prediction: {message}")]
    Malformed { line: usize, message: String },
    #[error("baseline table: {0}")]
    Baselines(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
