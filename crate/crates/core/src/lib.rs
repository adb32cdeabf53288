pub mod channel;
pub mod control_mpc;
pub mod control_rl;
pub mod error;
pub mod netmodel;
pub mod observability;
pub mod orbits;
pub mod protocols;
pub mod sdqn;

pub use error::{Error, Result};
pub mod sim;

pub use sim::{run_scenario, ControllerKind, MetricsSummary, RunOutput, SimConfig, TraceRecord};
