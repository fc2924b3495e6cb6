use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("invalid scale: {0}")]
    InvalidScale(String),

    #[error("degenerate input{}", index.map(|i| format!(" at index {i}")).unwrap_or_default())]
    DegenerateInput { index: Option<usize> },

    #[error("invalid truncation: delta {delta} must be below the dimension {dim}")]
    InvalidTruncation { delta: f64, dim: usize },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("invalid contamination fraction {0}; expected a value in [0, 1)")]
    InvalidFraction(f64),

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("invalid dimension {0}")]
    InvalidDim(usize),

    #[error("all weights are zero")]
    DegenerateWeights,

    #[error("exact enumeration needs {subsets} subsets, over the budget of {budget}")]
    BudgetExceeded { subsets: u128, budget: u128 },

    #[error("SDP solver failed after {iterations} iterations: {reason}")]
    SolverFailure {
        iterations: usize,
        reason: String,
        /// Objective value of the best iterate whose moment matrix was
        /// PSD; still a valid lower bound on the relaxation value.
        best_value: Option<f64>,
    },

    #[error("inconsistent filter state: {0}")]
    InconsistentState(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Outermost stage tag, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// The innermost error, skipping stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Short machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::InvariantViolation(_) => "InvariantViolation",
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::InvalidScale(_) => "InvalidScale",
            Error::DegenerateInput { .. } => "DegenerateInput",
            Error::InvalidTruncation { .. } => "InvalidTruncation",
            Error::TooFewSamples { .. } => "TooFewSamples",
            Error::InvalidFraction(_) => "InvalidFraction",
            Error::ShapeError(_) => "ShapeError",
            Error::InvalidDim(_) => "InvalidDim",
            Error::DegenerateWeights => "DegenerateWeights",
            Error::BudgetExceeded { .. } => "BudgetExceeded",
            Error::SolverFailure { .. } => "SolverFailure",
            Error::InconsistentState(_) => "InconsistentState",
            Error::Parse { .. } => "ParseError",
            Error::Io(_) => "Io",
            Error::Stage { .. } => unreachable!("root() strips stage tags"),
        }
    }
}
