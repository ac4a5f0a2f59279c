//! Error type shared by every module of the crate.

use std::fmt;

/// Errors raised by the transform algebra, moment propagation, and map
/// operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An input value is NaN or infinite.
    InvalidValue(String),
    /// Vector or matrix dimensions do not conform.
    ShapeMismatch { expected: String, got: String },
    /// Two 6-DOF poses with different orientation conventions were combined.
    ConventionMismatch,
    /// The orientation is too close to the parameterization's degenerate
    /// configuration for a Jacobian to be evaluated.
    SingularOrientation { margin: f64 },
    /// A matrix required to be positive (semi-)definite is not.
    NonPositiveDefinite,
    /// The innovation covariance is not positive definite; the update
    /// cannot proceed.
    InnovationNotPD,
    /// A variance needed for normalization is zero or negative.
    ZeroVariance,
    /// A correlation coefficient left [-1, 1] beyond numerical slack,
    /// signalling a corrupted covariance.
    CorrelationOutOfRange(f64),
    /// An entity id does not belong to the map.
    UnknownEntity(usize),
    /// An entity's kind does not support the requested operation.
    KindMismatch { expected: String, got: String },
    /// The same entity was referenced twice where distinct entities are
    /// required.
    DuplicateEntity(usize),
    /// A numeric evaluation produced a non-finite result.
    NumericalFailure(String),
    /// A scenario references a name that was never declared.
    UnknownName(String),
    /// A scenario or snapshot document failed structural validation.
    Schema(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidValue(what) => write!(f, "invalid value: {what}"),
            Error::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            Error::ConventionMismatch => {
                write!(f, "poses use different orientation conventions")
            }
            Error::SingularOrientation { margin } => {
                write!(f, "orientation within {margin:.3e} of a singularity")
            }
            Error::NonPositiveDefinite => write!(f, "matrix is not positive definite"),
            Error::InnovationNotPD => {
                write!(f, "innovation covariance is not positive definite")
            }
            Error::ZeroVariance => write!(f, "variance is zero"),
            Error::CorrelationOutOfRange(rho) => {
                write!(f, "correlation coefficient {rho} outside [-1, 1]")
            }
            Error::UnknownEntity(id) => write!(f, "unknown entity id {id}"),
            Error::KindMismatch { expected, got } => {
                write!(f, "entity kind mismatch: expected {expected}, got {got}")
            }
            Error::DuplicateEntity(id) => write!(f, "entity id {id} referenced twice"),
            Error::NumericalFailure(what) => write!(f, "numerical failure: {what}"),
            Error::UnknownName(name) => write!(f, "unknown entity name {name:?}"),
            Error::Schema(what) => write!(f, "schema error: {what}"),
        }
    }
}

impl std::error::Error for Error {}

pub type Result<T> = std::result::Result<T, Error>;
