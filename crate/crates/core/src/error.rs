use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("edge {edge} references unknown node `{node}`")]
    DanglingEdge { edge: usize, node: String },
    #[error("PCC node `{0}` is not among the nodes")]
    MissingPcc(String),
    #[error("edge {0} is a self-loop")]
    SelfLoop(usize),
    #[error("edge {edge} has impedance {re}{im:+}j ohm; need Re(z) > 0 and Im(z) >= 0")]
    InvalidImpedance { edge: usize, re: f64, im: f64 },
    #[error("edge {0} has zero impedance")]
    ZeroImpedance(usize),
    #[error("graph is disconnected: node `{0}` cannot be reached from the PCC")]
    Disconnected(String),
    #[error("grid is not radial (expected {expected} edges for a tree, found {found})")]
    NotRadial { expected: usize, found: usize },
    #[error("node index {index} out of range for {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid compensator set: {0}")]
    InvalidCompensators(String),
    #[error("invalid cluster configuration: {0}")]
    InvalidClusters(String),
    #[error("inconsistent effective-resistance matrix: {0}")]
    InconsistentReff(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("i/o error on `{path}`: {message}")]
    Io { path: String, message: String },
    #[error("power flow did not converge after {iterations} iterations (last relative change {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("zero voltage at constant-power node {0}")]
    ZeroVoltage(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("problem too large: {0}")]
    TooLarge(String),
    #[error("internal numerical inconsistency: {0}")]
    Internal(String),
}

impl Error {
    /// Numerical failures (as opposed to bad input). The CLI maps these to exit code 2.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::ZeroVoltage(_) | Error::Internal(_)
        )
    }
}
