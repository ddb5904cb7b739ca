//! Caliper-style benchmark engine: declarative rounds, fixed-rate load,
//! latency/throughput aggregation and report rendering.

pub mod config;
pub mod metrics;
mod runner;
pub mod workload;

pub use config::{BenchmarkConfig, Round};
pub use metrics::{percentile, render_report, summarize, MetricsReport, ReportFormat, RoundMetrics, TxSample};
pub use runner::Bench;

use passion_core::chaincode::AccessError;
use passion_core::txflow::TxFlowError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid benchmark config: {0}")]
    Config(String),
    #[error("state preparation failed: {0}")]
    Prepare(String),
    #[error(transparent)]
    Flow(#[from] TxFlowError),
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error("a benchmark worker panicked")]
    Worker,
}
