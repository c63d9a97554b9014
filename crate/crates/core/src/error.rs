//! Crate-wide error type.

use crate::paradigm::PredictionKind;

/// Errors raised by state construction, schedule building, denoising and
/// training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("level out of range at variable {index}: {value} not in [0, 1]")]
    LevelOutOfRange { index: usize, value: f64 },
    #[error("conditioned variable must be clean: variable {index} has level {level}")]
    ConditionedNotClean { index: usize, level: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("index out of range in {context}: {index} >= {bound}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("cycle detected: edge {parent} -> {child} lies on a cycle")]
    CycleDetected { parent: usize, child: usize },
    #[error("noise level {t} is off the discrete grid of {steps} steps")]
    OffGridLevel { t: f64, steps: usize },
    #[error("singular conversion {from:?} -> {to:?} at t = {t}")]
    SingularConversion {
        from: PredictionKind,
        to: PredictionKind,
        t: f64,
    },
    #[error("time derivatives are undefined for the discrete-step paradigm (requested {0})")]
    DerivativesUndefined(&'static str),
    #[error("step method incompatible with paradigm: {0}")]
    MethodParadigmMismatch(&'static str),
    #[error("ancestral step requires adjacent grid levels, got {from_t} -> {to_t}")]
    NonAdjacentAncestralStep { from_t: f64, to_t: f64 },
    #[error("target level {target} above current level {current} at variable {index}")]
    TargetAboveCurrent {
        index: usize,
        current: f64,
        target: f64,
    },
    #[error("invalid mixture: {0}")]
    InvalidMixture(&'static str),
    #[error("singular innovation matrix in component {component}; a component covariance is numerically degenerate at the given levels")]
    SingularInnovation { component: usize },
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("schedule needs more steps: {needed} sequential windows but only {steps} steps")]
    TooFewSteps { needed: usize, steps: usize },
    #[error("graph-based order requested but no dependency graph was provided")]
    MissingGraph,
    #[error("adaptive selection made no progress: no variable selectable while levels remain nonzero")]
    NoProgress,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
