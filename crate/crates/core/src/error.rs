use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("block index {index} out of range for {blocks} blocks")]
    BlockOutOfRange { index: usize, blocks: usize },

    #[error("non-finite target value {0}")]
    NonFiniteTarget(f64),

    #[error("stream exhausted after {0} frames")]
    StreamExhausted(usize),

    #[error("bad magic 0x{0:08x}")]
    BadMagic(u32),

    #[error("unsupported wire version {0}")]
    VersionMismatch(u16),

    #[error("unknown message type {0}")]
    UnknownMsgType(u8),

    #[error("truncated buffer: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),

    #[error("block id 0x{0:04x} does not name a segment of this model")]
    BadBlockId(u16),

    #[error("segment 0x{block_id:04x}: expected {expected} parameters, got {got}")]
    ParamCountMismatch {
        block_id: u16,
        expected: usize,
        got: usize,
    },

    #[error("unknown client id {0}")]
    UnknownClient(u32),

    #[error("duplicate update from client {client} for round {round}")]
    DuplicateUpdate { client: u32, round: u32 },

    #[error("client {client} has role {role:?}, operation requires {required:?}")]
    WrongRole {
        client: u32,
        role: crate::federation::ClientRole,
        required: crate::federation::ClientRole,
    },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("empty metric group: {0}")]
    EmptyGroup(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
