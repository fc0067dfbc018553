use std::fmt;

use thiserror::Error;

/// One failed POVM invariant, with the residual that exceeded the tolerance.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Empty,
    DimensionMismatch { effect: usize, expected: usize, found: usize },
    NotPsd { effect: usize, eigenvalue: f64 },
    NotNormalized { residual: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "no effects"),
            Violation::DimensionMismatch { effect, expected, found } => {
                write!(f, "effect {effect} has dimension {found}, expected {expected}")
            }
            Violation::NotPsd { effect, eigenvalue } => {
                write!(f, "effect {effect} is not positive semidefinite (min eigenvalue {eigenvalue:e})")
            }
            Violation::NotNormalized { residual } => {
                write!(f, "effects do not sum to the identity (Frobenius residual {residual:e})")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian (deviation {deviation:e})")]
    NotHermitian { deviation: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid POVM: {}", join(.0))]
    InvalidPovm(Vec<Violation>),
    #[error("invalid joint measurement: {0}")]
    InvalidJoint(String),
    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("party index {party} out of range for {parties} measurements")]
    PartyOutOfRange { party: usize, parties: usize },
    #[error("invalid SDP: {0}")]
    InvalidProblem(String),
    #[error("tuple is incompatible (dual certificate residual {certificate_residual:e})")]
    Incompatible { certificate_residual: f64 },
    #[error("solver failure in {context}: {detail}")]
    Solver { context: String, detail: String },
    #[error("joint measurements coincide; no perturbation direction")]
    ZeroPerturbation,
    #[error("{which} is not a joint measurement for the tuple (residual {residual:e})")]
    NotAJoint { which: String, residual: f64 },
    #[error("iteration cap of {0} directions exceeded")]
    IterationCap(usize),
    #[error("unknown fixture `{0}`")]
    UnknownFixture(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join(violations: &[Violation]) -> String {
    violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl Error {
    pub(crate) fn solver(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Solver { context: context.into(), detail: detail.into() }
    }

    /// Stable machine-readable tag used in JSON error objects.
    pub fn reason(&self) -> &'static str {
        match self {
            Error::Incompatible { .. } => "incompatible",
            Error::Solver { .. } => "solver_failure",
            Error::IterationCap(_) => "iteration_cap",
            Error::Io(_) => "io",
            Error::ZeroPerturbation => "zero_perturbation",
            Error::NotAJoint { .. } => "not_a_joint",
            _ => "invalid_input",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
