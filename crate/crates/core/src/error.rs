use std::io;

/// Errors produced anywhere in the streaming reconstruction pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed wire data. `position` is the byte offset (within the
    /// decoded buffer or stream) of the offending field.
    #[error("protocol error at byte {position}: {reason}")]
    Protocol { position: u64, reason: String },

    #[error("truncated record at byte {position}: expected {expected} bytes, got {got}")]
    Truncated {
        position: u64,
        expected: u64,
        got: u64,
    },

    #[error("routing error: {0}")]
    Routing(String),

    #[error("slice {0} has no completed update yet")]
    NotReady(usize),

    /// A sink or peer went away. `last_seq` is the last frame that made it
    /// through, if any.
    #[error("connection error on {endpoint} (last delivered seq: {last_seq:?}): {source}")]
    Connection {
        endpoint: String,
        last_seq: Option<u64>,
        #[source]
        source: io::Error,
    },

    #[error("enhancement failed: {0}")]
    Enhancement(String),

    #[error("pipeline stage failed: {0}")]
    Pipeline(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn protocol(position: u64, reason: impl Into<String>) -> Self {
        Error::Protocol {
            position,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
