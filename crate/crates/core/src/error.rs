//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A scalar argument is outside its admissible range.
    #[error("parameter `{name}` out of domain: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// Two objects that must agree in length or shape do not.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// Input data that cannot be processed (non-finite values, empty sets).
    #[error("invalid input: {0}")]
    Input(String),

    /// A scheduling decision violates the per-worker peak power limit.
    #[error("power constraint violated for worker {worker}: {power} > {limit}")]
    PowerConstraint { worker: usize, power: f64, limit: f64 },

    /// No worker is scheduled where at least one is required.
    #[error("empty schedule: {0}")]
    EmptySchedule(&'static str),

    /// The problem is too large for the requested solver.
    #[error("{solver} refuses U = {workers} (cap {cap}); use the ADMM solver instead")]
    TooLarge {
        solver: &'static str,
        workers: usize,
        cap: usize,
    },

    /// A forward or backward pass produced non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed binary input (IDX files).
    #[error("format error in {path}: field `{field}`: {reason}")]
    Format {
        path: PathBuf,
        field: &'static str,
        reason: String,
    },

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Any error raised during a specific federated round.
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short name of the variant, for machine-readable reports. Round
    /// wrappers report the kind of the underlying error.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parameter { .. } => "parameter",
            Error::Shape { .. } => "shape",
            Error::Input(_) => "input",
            Error::PowerConstraint { .. } => "power_constraint",
            Error::EmptySchedule(_) => "empty_schedule",
            Error::TooLarge { .. } => "too_large",
            Error::Numeric(_) => "numeric",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Round { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e => Error::Round {
                round,
                source: Box::new(e),
            },
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Shape {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_wrapper_keeps_the_inner_kind() {
        let e = Error::param("delta", "too large").in_round(3);
        assert_eq!(e.kind(), "parameter");
        assert_eq!(e.to_string(), "round 3: parameter `delta` out of domain: too large");
        // wrapping twice keeps the first round
        assert!(matches!(e.in_round(4), Error::Round { round: 3, .. }));
    }

    #[test]
    fn shape_check() {
        assert!(check_len("x", 2, 2).is_ok());
        assert_eq!(check_len("x", 2, 3).unwrap_err().kind(), "shape");
    }
}
