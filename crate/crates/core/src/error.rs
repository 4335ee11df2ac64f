//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by tensor ops, the volume pipeline, model construction,
/// training, and inference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Operand shapes are inconsistent. Carries a diagnostic naming the
    /// offending extents.
    Shape(String),
    /// An API was called in the wrong order, e.g. backward twice on one tape.
    State(String),
    /// A configuration value violates its invariants.
    Config(String),
    /// An index is outside its declared bounds.
    Bounds(String),
    /// A regrouped slice was covered by zero groups.
    Coverage(String),
    /// Phantom geometry stayed degenerate after the bounded retry budget.
    Geometry(String),
    /// A numeric failure such as a NaN loss.
    Numeric(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Bounds(m) => write!(f, "bounds error: {m}"),
            Error::Coverage(m) => write!(f, "coverage error: {m}"),
            Error::Geometry(m) => write!(f, "geometry error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
