use thiserror::Error;

/// Structural problems with a grid description.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("{element} {index} references unknown bus {bus}")]
    UnknownBus {
        element: &'static str,
        index: usize,
        bus: usize,
    },
    #[error("line {0} has zero series impedance")]
    ZeroImpedance(usize),
    #[error("transformer {0} has zero short-circuit voltage")]
    ZeroTransformerImpedance(usize),
    #[error("line {0} connects bus {1} to itself")]
    SelfLoop(usize, usize),
    #[error("invalid {element} {index}: {reason}")]
    Invalid {
        element: &'static str,
        index: usize,
        reason: String,
    },
    #[error("network must have exactly one slack bus, found {0}")]
    SlackCount(usize),
    #[error("network has no interface transformer")]
    NoInterface,
    #[error("network is not connected: bus {0} unreachable from the slack")]
    Disconnected(usize),
    #[error("outage references line {0}, which is unknown or already out of service")]
    BadOutage(usize),
    #[error("active power {p} outside [0, {p_inst}]")]
    PowerOutOfRange { p: f64, p_inst: f64 },
}

/// Errors raised by numerical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("power flow did not converge: {0}")]
    NonConvergence(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
