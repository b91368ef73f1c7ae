use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },
    #[error("masked_softmax row {row} has no feasible entry")]
    FullyMaskedRow { row: usize },
    #[error("backward root must be a 1x1 scalar, got {rows}x{cols}")]
    ScalarRootRequired { rows: usize, cols: usize },
    #[error("index ({row},{col}) out of bounds for {rows}x{cols} in {op}")]
    IndexOutOfBounds {
        op: &'static str,
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("log of non-positive value {value:e} at ({row},{col})")]
    NonPositiveLog { row: usize, col: usize, value: f64 },
    #[error("empty concatenation")]
    EmptyConcat,
}
