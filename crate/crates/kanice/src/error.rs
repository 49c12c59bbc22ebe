//! Error type shared across the crate.

use std::fmt;
use std::io;

/// All failure modes surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// `backward` was called on a tensor that is not a scalar.
    NotScalar { shape: Vec<usize> },
    /// The tape was already consumed by a previous backward pass.
    TapeConsumed,
    /// A knot vector violates the basis invariants.
    InvalidBasis(String),
    /// The regularized least-squares system is singular.
    RankDeficient,
    /// Batch statistics are undefined for a single element.
    BatchTooSmall { elements: usize },
    /// The group count does not divide the feature dimensions.
    GroupMismatch {
        groups: usize,
        in_features: usize,
        out_features: usize,
    },
    /// Regularization strength must be non-negative.
    NegativeLambda(f64),
    /// Perturbation magnitude must be non-negative.
    NegativeEpsilon(f64),
    /// The model spec cannot be instantiated (e.g. pooled size reaches zero).
    InvalidSpec(String),
    /// A file did not start with the expected magic number.
    BadMagic { expected: String, found: String },
    /// Header dimensions disagree with each other or with the payload.
    DimensionMismatch(String),
    /// The file ended before the declared payload.
    TruncatedFile { expected: usize, found: usize },
    /// A label lies outside `[0, num_classes)`.
    LabelOutOfRange { label: usize, num_classes: usize },
    /// Two container entries share a name.
    DuplicateName(String),
    /// Statistics over fewer runs than the estimator needs.
    TooFewRuns { needed: usize, got: usize },
    /// A feature-shift tap does not name a layer boundary.
    InvalidTap { tap: usize, layers: usize },
    /// Wrapped I/O error with the offending path.
    Io { path: String, source: io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "shape mismatch in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::TapeConsumed => write!(f, "tape already consumed by a backward pass"),
            Error::InvalidBasis(msg) => write!(f, "invalid spline basis: {msg}"),
            Error::RankDeficient => write!(f, "least-squares system is rank deficient"),
            Error::BatchTooSmall { elements } => {
                write!(f, "batch statistics need at least 2 elements, got {elements}")
            }
            Error::GroupMismatch {
                groups,
                in_features,
                out_features,
            } => write!(
                f,
                "groups {groups} must divide in_features {in_features} and out_features {out_features}"
            ),
            Error::NegativeLambda(l) => write!(f, "lambda must be >= 0, got {l}"),
            Error::NegativeEpsilon(e) => write!(f, "epsilon must be >= 0, got {e}"),
            Error::InvalidSpec(msg) => write!(f, "invalid model spec: {msg}"),
            Error::BadMagic { expected, found } => {
                write!(f, "bad magic: expected {expected}, found {found}")
            }
            Error::DimensionMismatch(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::TruncatedFile { expected, found } => {
                write!(f, "truncated file: expected {expected} bytes, found {found}")
            }
            Error::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            Error::DuplicateName(name) => write!(f, "duplicate tensor name {name:?}"),
            Error::TooFewRuns { needed, got } => {
                write!(f, "need at least {needed} runs, got {got}")
            }
            Error::InvalidTap { tap, layers } => {
                write!(f, "tap {tap} out of range for model with {layers} layers")
            }
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
