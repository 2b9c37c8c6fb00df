use thiserror::Error;

/// Library-wide error type. Construction failures use `Invalid`; everything
/// else maps one-to-one onto a failure mode of a specific operation.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("measures are not equivalent: {0}")]
    EquivalenceViolation(String),
    #[error("objects live on different spaces: {0}")]
    SpaceMismatch(String),
    #[error("conditioning on a null event: {0}")]
    DegenerateConditioning(String),
    #[error("no strictly positive martingale measure: {0}")]
    NoArbitrageViolation(String),
    #[error("argument outside the admissible domain: {0}")]
    DomainError(String),
    #[error("solver did not converge: {0}")]
    SolverFailure(String),
    #[error("invalid numeraire: {0}")]
    InvalidNumeraire(String),
    #[error("law does not match the random element: {0}")]
    LawMismatch(String),
    #[error("operation requires a complete market: {0}")]
    CompletenessRequired(String),
    #[error("pricing density fails the martingale certificate: {0}")]
    MartingalePropertyViolation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
