use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed configuration; `key` names the offending entry.
    #[error("parse error at `{key}`: {reason}")]
    Parse { key: String, reason: String },

    #[error("invalid model: {}", format_violations(.0))]
    Invalid(Vec<Violation>),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("future gains missing: expected {expected} timesteps, got {got}")]
    MissingFutureGains { expected: usize, got: usize },

    #[error("non-finite {what} at t={t}, k={k}")]
    NonFinite { what: &'static str, t: usize, k: usize },

    /// Viability was observed to switch from viable to non-viable as the
    /// attenuation level increased.
    #[error("viability is not monotone in gamma: viable at {viable_at}, not viable at {not_viable_at}")]
    NonMonotone { viable_at: f64, not_viable_at: f64 },
}

impl Error {
    /// True for failures caused by the input rather than by numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Parse { .. }
                | Error::Invalid(_)
                | Error::Dimension(_)
                | Error::InvalidArgument(_)
                | Error::MissingFutureGains { .. }
        )
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}
