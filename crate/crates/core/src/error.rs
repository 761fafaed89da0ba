use thiserror::Error;

/// Errors shared across the crate.
///
/// Numeric routines fail loudly rather than silently producing NaN: every
/// operation that can overflow, divide by zero, or leave its domain checks its
/// output and reports which computation went wrong.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value (NaN or infinity) appeared where finite numbers are
    /// required. `context` names the operation that produced it.
    #[error("numeric fault in {context}")]
    NumericFault { context: String },

    /// The request would enumerate more joint states than the brute-force
    /// routines allow.
    #[error("model too large for exact enumeration: {states} states exceeds the {limit} cap")]
    Capacity { states: u128, limit: u128 },

    /// A model, dataset, or config file failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// File contents parsed but described something invalid (bad index,
    /// non-positive potential, inconsistent counts, ...).
    #[error("invalid input: {0}")]
    Domain(String),

    /// A marginal query asked for variables no region covers.
    #[error("unanswerable query: {0}")]
    Query(String),

    /// A constructed graph failed a structural requirement.
    #[error("structural error: {0}")]
    Structure(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::NumericFault { context: context.into() }
    }
}
