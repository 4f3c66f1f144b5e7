use thiserror::Error;

/// Errors raised anywhere in the imputation pipeline.
///
/// Variants split into two families: problems with the caller's input
/// (`is_user_error`) and numerical failures of a solver or sampler.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("non-x1 missingness in column `{column}` at row {row}")]
    NonX1Missing { column: String, row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "{what} did not converge after {iterations} iterations (gradient sup-norm {gradient:.3e})"
    )]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        gradient: f64,
    },

    #[error("{0}: design matrix is rank deficient")]
    RankDeficient(&'static str),

    #[error("{what}: separation detected (parameter {index} reached {value:.3})")]
    Separation {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("category {0} has no observations in the fitting rows")]
    EmptyCategory(u32),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("imputation copy {copy}: {source}")]
    Copy {
        copy: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True when the error stems from bad input rather than a numerical failure.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Schema(_)
            | Error::InvalidData(_)
            | Error::NonX1Missing { .. }
            | Error::InvalidArgument(_)
            | Error::EmptyCategory(_) => true,
            Error::Copy { source, .. } => source.is_user_error(),
            _ => false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::Schema(_) => "schema",
            Error::InvalidData(_) => "invalid_data",
            Error::NonX1Missing { .. } => "non_x1_missingness",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonConvergence { .. } => "non_convergence",
            Error::RankDeficient(_) => "rank_deficient",
            Error::Separation { .. } => "separation",
            Error::EmptyCategory(_) => "empty_category",
            Error::Numeric(_) => "numeric",
            Error::Copy { source, .. } => source.kind(),
        }
    }

    pub(crate) fn in_copy(self, copy: usize) -> Error {
        Error::Copy {
            copy,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
