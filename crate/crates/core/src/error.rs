use thiserror::Error;

/// Errors produced by the simulation library.
#[derive(Debug, Error)]
pub enum Error {
    /// The (possibly penalized) normal-equations matrix is not positive definite.
    #[error("singular design")]
    SingularDesign,

    /// A DGP was requested with an empty set of relevant covariates.
    #[error("no relevant covariates")]
    NoRelevantCovariates,

    /// Prior loss is requested for a flat (gamma = 0) prior with no data.
    #[error("improper prior has no loss")]
    ImproperPriorNoLoss,

    /// The posterior mean of the noise variance does not exist (a0 + n/2 <= 1).
    #[error("posterior mean undefined")]
    PosteriorMeanUndefined,

    /// The ex-ante expected loss requires n > |J| + 1.
    #[error("inverse-Wishart mean undefined")]
    InverseWishartMeanUndefined,

    /// Subset enumeration was requested for k > 20.
    #[error("roster too large")]
    RosterTooLarge,

    /// A quadrature grid leaves more than 0.1% of the prior mass outside its ranges.
    #[error("grid truncation")]
    GridTruncation,

    /// A drifting-prior schedule must grow strictly faster than n^2.
    #[error("schedule not in omega(n^2)")]
    ScheduleTooSlow,

    /// The MLE residual variance is zero, so its log is undefined.
    #[error("log of zero variance")]
    LogOfZeroVariance,

    /// A domain-type invariant was violated.
    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },

    /// An agent failed on a dataset; carries the agent's label.
    #[error("agent {label}: {source}")]
    Agent {
        label: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            why: why.into(),
        }
    }

    /// True for errors caused by malformed user input rather than numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Invalid { .. } | Error::Io { .. } | Error::Parse { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
