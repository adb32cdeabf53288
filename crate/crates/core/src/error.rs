use thiserror::Error;

/// Errors surfaced by the library. Constraint violations that the
/// simulation is expected to observe (key outages, reserve breaches) are
/// trace events, not errors.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no path from {src} to {dst}")]
    NoPath { src: String, dst: String },

    #[error("intent {0} has no residency-legal path")]
    InfeasibleIntent(String),

    #[error("illegal key-block transition {from} -> {to}")]
    IllegalTransition { from: String, to: String },

    #[error("flow table install rejected: {0}")]
    InvalidPath(String),

    #[error("optimization infeasible: {0}")]
    Infeasible(String),

    #[error("training diverged at episode {episode}: {detail}")]
    Diverged { episode: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
