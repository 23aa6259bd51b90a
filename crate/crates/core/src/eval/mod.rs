//! Metrics, reports, and the cross-validated experiment runner.

mod experiment;
mod metrics;
mod report;

pub use experiment::*;
pub use metrics::{accuracy, f1, roc_auc, ConfusionCounts, RocPoint};
pub use report::{comparison_table, FoldMetrics, MetricsReport, RunMeta, Summary};
