//! Scenario configuration, the two-rate engine, traces and metrics.

pub mod compare;
pub mod config;
pub mod engine;
pub mod metrics;
pub mod trace;
pub mod weather;

pub use config::{ControllerKind, SimConfig};
pub use engine::{run_scenario, RunOutput};
pub use metrics::{compute_metrics, MetricsSummary};
pub use trace::{read_trace, trace_to_bytes, write_trace, Category, Payload, TraceRecord};
