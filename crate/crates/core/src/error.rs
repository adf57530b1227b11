use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("time {time} outside [0, {horizon}]")]
    TimeOutOfRange { time: f64, horizon: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A non-finite state was produced; `time` is the integration time at failure.
    #[error("integration failure at t = {time}")]
    IntegrationFailure { time: f64 },

    /// Loss of complementarity between a pair of distributions.
    #[error("degenerate splitting (|det| = {det:e}, condition = {condition:e})")]
    Degenerate { det: f64, condition: f64 },

    #[error("inverse solve failed: {0}")]
    InverseFailure(String),

    #[error("point outside domain: {0}")]
    OutsideDomain(String),

    #[error("mesh resolution failure: {0}")]
    MeshResolution(String),

    #[error("missing jacobians on trajectory")]
    MissingJacobians,
}

pub type Result<T> = std::result::Result<T, Error>;
