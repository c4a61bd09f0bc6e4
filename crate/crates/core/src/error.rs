use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {tensor}: expected {expected}, got {got}")]
    Shape {
        tensor: &'static str,
        expected: String,
        got: String,
    },

    #[error("id {id} outside shard rows {start}..{end} of table {table}")]
    IdOutOfRange {
        table: usize,
        id: u32,
        start: u32,
        end: u32,
    },

    #[error("example index {index} out of range (num_examples {num_examples})")]
    IndexOutOfRange { index: u64, num_examples: u64 },

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("sync round aborted: {0}")]
    SyncAborted(String),

    #[error("normalized entropy undefined: all labels identical")]
    UndefinedNe,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
