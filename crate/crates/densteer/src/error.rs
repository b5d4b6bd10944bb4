use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("component {index}: covariance is singular even after regularization")]
    DegenerateComponent { index: usize },

    #[error("{model}: drift singularity near the origin (|r| = {radius:.3e})")]
    DriftSingularity { model: String, radius: f64 },

    #[error("unknown dynamics model '{0}'")]
    UnknownModel(String),

    #[error(
        "covariance steering SDP is infeasible; consider increasing the noise regularization"
    )]
    SdpInfeasible,

    #[error("conic solver stopped with status {status}")]
    SolverFailure { status: String },

    #[error("steering Gramian is rank deficient: the pair is uncontrollable over this grid")]
    UncontrollablePair,

    #[error("invalid transport marginals: {0}")]
    InvalidMarginals(String),

    #[error(
        "reference trajectory optimization did not converge after {iterations} iterations \
         (max defect {defect:.3e}, boundary residual {boundary:.3e})"
    )]
    ReferenceNotConverged {
        iterations: usize,
        defect: f64,
        boundary: f64,
    },

    #[error("no usable data: {0}")]
    NoData(String),

    #[error("config: {0}")]
    Config(String),

    #[error("pair ({i}, {j}): {source}")]
    Pair {
        i: usize,
        j: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps an error with the boundary component pair it belongs to.
    pub fn for_pair(self, i: usize, j: usize) -> Self {
        Error::Pair {
            i,
            j,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
