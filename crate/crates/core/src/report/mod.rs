//! Experiment configuration, metrics persistence and analysis reports.

mod config;
mod histogram;
mod lock;
mod metrics;
mod table;

pub use config::{ExperimentConfig, GridAxisConfig, Precision, ScheduleOverrides};
pub use histogram::{LeafHistogram, NodeHistogram, ELIDE_FRACTION};
pub use lock::OutputLock;
pub use metrics::{read_metrics, read_metrics_dir, MetricRecord, MetricsWriter};
pub use table::{summarize, RunSummary, SummaryRow, SummaryTable};
