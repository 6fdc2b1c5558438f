use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("division by exact zero")]
    DivisionByZero,

    #[error("backward requires scalar root")]
    NonScalarRoot,

    #[error("negative input {value} at index {index} where a non-negative value is required")]
    NegativeInput { index: usize, value: f64 },

    #[error("empty group in partition")]
    EmptyGroup,

    #[error("invalid grouping: {0}")]
    InvalidGrouping(String),

    #[error("group size must be at least 1")]
    EmptyGateGroup,

    #[error("gate mode {0} not valid for this operation")]
    WrongGateMode(&'static str),

    #[error("component {index} is active (gate value {value}); probe requires a dead gate")]
    ActiveGate { index: usize, value: f64 },

    #[error("input at index {index} is within {distance} of a kink")]
    AtKink { index: usize, distance: f64 },

    #[error("sinkhorn requires total support")]
    NoTotalSupport,

    #[error("normalization did not converge in {iters} iterations (deviation {deviation:e})")]
    NotConverged { iters: usize, deviation: f64 },

    #[error("batch of {0} is too small for batch statistics in training mode")]
    BatchTooSmall(usize),

    #[error("cycle detected in wiring topology")]
    CycleDetected,

    #[error("target at index {index} is {value}; relative error needs strictly positive targets")]
    NonPositiveTarget { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
