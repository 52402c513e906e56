use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op} requires a square matrix, got {rows}x{cols}")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("dimension {0} exceeds the supported maximum of 16")]
    DimensionTooLarge(usize),

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("invalid observable: {0}")]
    InvalidObservable(String),

    #[error("invalid channel: {0}")]
    InvalidChannel(String),

    #[error("invalid measurement set: {0}")]
    InvalidMeasurementSet(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown name: {0}")]
    UnknownName(String),

    /// The weight equation has no exact solution for this measurement set.
    #[error("infeasible weight system: least-squares residual {residual:.3e}")]
    Infeasible { residual: f64 },

    #[error("linear program failed: {0}")]
    Solver(String),

    #[error("outcome space of {0} trajectories exceeds the enumeration limit")]
    OutcomeOverflow(u128),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("singular confusion matrix at step {0}")]
    SingularConfusion(usize),
}
