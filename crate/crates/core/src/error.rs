//! Error type shared by every module of the simulator.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{num_experts} experts cannot be split evenly across {num_devices} devices")]
    NonDivisible { num_experts: usize, num_devices: usize },

    #[error("k = {k} is out of range for {num_experts} experts")]
    BadK { k: usize, num_experts: usize },

    #[error("invalid gate vector: {0}")]
    BadGates(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("normalization group {group} has no entries")]
    EmptyGroup { group: usize },

    #[error("batch contains no tokens")]
    EmptyBatch,

    #[error("routing log has no {0} entries")]
    EmptyModality(&'static str),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("integer overflow computing {0}")]
    Overflow(&'static str),

    #[error("capacity plan covers {plan} experts but the topology has {topology}")]
    PlanMismatch { plan: usize, topology: usize },

    #[error("slot ({token}, {rank}) is unresolved")]
    UnresolvedSlot { token: usize, rank: usize },

    #[error("division by zero: {0}")]
    DivideByZero(&'static str),

    #[error("invalid workload spec: {0}")]
    SpecInvalid(String),

    #[error("config parse error at {path} (line {line}, column {column}): {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown config field at {path}: {message}")]
    UnknownField { path: String, message: String },

    #[error("{field} out of range: {message}")]
    Range { field: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn range(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Range {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
