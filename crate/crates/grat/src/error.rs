//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two tensor shapes that were required to agree did not.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A tensor had an invalid shape for the operation (wrong rank, empty dim, ...).
    BadShape { op: &'static str, shape: Vec<usize>, reason: &'static str },
    /// A tensor created on one tape was fed to another.
    ForeignTape { op: &'static str },
    /// `backward` called on a non-scalar tensor.
    NonScalarLoss { shape: Vec<usize> },
    /// `backward` called twice without resetting the tape.
    BackwardAlreadyRun,
    /// `log` of a non-positive entry.
    NonPositiveLog { value: f64 },
    /// Non-finite value where a finite one is required.
    NonFinite { op: &'static str },
    /// A softmax row with no admissible entries.
    EmptySoftmaxRow { row: usize },
    /// Gradient check target re-evaluated to a different value (unfrozen noise).
    NonDeterministicFn,
    /// Gumbel-Softmax temperature must be positive.
    BadTemperature { tau: f64 },
    /// Invalid decoder or experiment configuration.
    BadConfig(String),
    /// Scenario spec that cannot be generated.
    BadScenario(String),
    /// Training diverged; the message names the step.
    NonFiniteLoss { step: usize },
    /// Checkpoint or clip file could not be decoded.
    BadFile(String),
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            Error::BadShape { op, shape, reason } => {
                write!(f, "{op}: bad shape {shape:?} ({reason})")
            }
            Error::ForeignTape { op } => {
                write!(f, "{op}: input tensor belongs to a different tape")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::BackwardAlreadyRun => write!(f, "backward already run on this tape"),
            Error::NonPositiveLog { value } => write!(f, "log of non-positive value {value}"),
            Error::NonFinite { op } => write!(f, "{op}: non-finite value"),
            Error::EmptySoftmaxRow { row } => {
                write!(f, "softmax row {row} has no admissible entries")
            }
            Error::NonDeterministicFn => {
                write!(f, "grad check target is not deterministic (unfrozen noise?)")
            }
            Error::BadTemperature { tau } => write!(f, "temperature must be > 0, got {tau}"),
            Error::BadConfig(msg) => write!(f, "config error: {msg}"),
            Error::BadScenario(msg) => write!(f, "scenario error: {msg}"),
            Error::NonFiniteLoss { step } => write!(f, "non-finite loss at step {step}"),
            Error::BadFile(msg) => write!(f, "file error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
