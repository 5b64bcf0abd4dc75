use std::io;

use thiserror::Error;

use crate::token::Cell;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("grid must have at least one frame")]
    ZeroFrames,

    #[error("token id {id} out of range for codebook size {codebook_size}")]
    TokenOutOfRange { id: u32, codebook_size: usize },

    #[error("semantic id {id} out of range for vocabulary size {vocab}")]
    SemanticOutOfRange { id: u32, vocab: usize },

    #[error("cell {0} is masked")]
    MaskedCell(Cell),

    #[error("{what} = {value} does not fit in 16 bits")]
    ValueTooLarge { what: &'static str, value: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("stream truncated while reading {0}")]
    Truncated(&'static str),

    #[error("{0} trailing bytes after end of stream")]
    TrailingBytes(usize),

    #[error("need at least {needed} frames, got {got}")]
    NotEnoughFrames { needed: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("codebook size {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("dependency {dependency} of cell {cell} is still masked")]
    UnresolvedDependency { cell: Cell, dependency: Cell },

    #[error("{iterations} iterations cannot fix at least one of {cells} cells per step")]
    ScheduleTooLong { iterations: usize, cells: usize },

    #[error("loss has no flagged cells")]
    NoFlaggedCells,

    #[error("tape does not belong to the current parameters: {0}")]
    StaleTape(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(e) => Error::Io(e),
            other => Error::Csv(format!("{other:?}")),
        }
    }
}
