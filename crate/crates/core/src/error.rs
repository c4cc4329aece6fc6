use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not unitary (max deviation {0:.3e})")]
    NonUnitary(f64),
    #[error("qubit index {index} out of range for a {n_qubits}-qubit state")]
    QubitOutOfRange { index: usize, n_qubits: usize },
    #[error("qubit index {0} listed more than once")]
    DuplicateQubit(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("channel is not trace preserving (max deviation {0:.3e})")]
    NotTracePreserving(f64),
    #[error("requested measurement branch has zero probability")]
    ZeroProbability,
    #[error("partial trace needs at least one qubit to keep")]
    EmptyKeep,
    #[error("unsupported register size {0} (1 to 4 qubits)")]
    RegisterSize(usize),
    #[error("invalid density matrix: {0}")]
    InvalidState(String),
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },
    #[error("measured intensity difference {diff} outside the physical range +/-{bound}")]
    InconsistentIntensity { diff: f64, bound: f64 },
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("fit did not converge after {iterations} iterations (last step {last_step:.3e})")]
    NonConvergence { iterations: usize, last_step: f64 },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("readout model is not invertible: F0 + F1 = {0} must exceed 1")]
    SingularReadout(f64),
    #[error("classical message collision at {receiver} ({first_s:.3e} s vs {second_s:.3e} s)")]
    MessageCollision {
        receiver: String,
        first_s: f64,
        second_s: f64,
    },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("resolution {resolution_s:.3e} s exceeds the Larmor period {tau_larmor_s:.3e} s")]
    ResolutionTooCoarse {
        resolution_s: f64,
        tau_larmor_s: f64,
    },
}

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
