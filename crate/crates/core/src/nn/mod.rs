//! Recurrent sequence models: embeddings, GRU/LSTM layers, a softmax head,
//! training and gradient verification.

pub mod embedding;
pub mod gradcheck;
pub mod io;
pub mod math;
pub mod model;
pub mod train;

use thiserror::Error;

pub use embedding::{EmbeddingTable, OOV_RANGE, PAD_TOKEN};
pub use gradcheck::{check_gradients, relative_error, BlockCheck, GradCheckReport};
pub use io::{read_model, write_model, ModelHeader, MODEL_HEADER};
pub use model::{
    apply_dropout, CellKind, CellParams, CellState, Example, Gradients, OutputMode, ParamBlock, RecurrentLayerSpec,
    SequenceModel, Target, MAX_DEPTH, MAX_DROPOUT,
};
pub use train::{fit, grid_search, parse_grid, ConfigGrid, ConfigReport, FitReport, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("empty input sequence")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("target mismatch: {0}")]
    TargetMismatch(String),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("training diverged (non-finite loss)")]
    Diverged,
    #[error("line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("unsupported format version: expected {expected:?}, found {found:?}")]
    VersionMismatch { expected: String, found: String },
}
