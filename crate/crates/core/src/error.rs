use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("evaluation produced a non-finite value at cell ({i}, {j}): {value}")]
    Evaluation { i: usize, j: usize, value: f64 },

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("simulation blew up at t={time} (step {step}): non-finite {field}")]
    BlowUp {
        time: f64,
        step: usize,
        field: &'static str,
    },

    #[error("step {step} failed in {stage}: {source}")]
    Step {
        step: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("autoregressive rollout diverged at step {step}")]
    RolloutDivergence { step: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("artifacts incomplete: {0}")]
    ArtifactIncomplete(String),

    #[error("fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonConvergence { .. }
            | Error::BlowUp { .. }
            | Error::Divergence { .. }
            | Error::RolloutDivergence { .. }
            | Error::LinearAlgebra(_)
            | Error::Evaluation { .. } => true,
            Error::Step { source, .. } | Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
