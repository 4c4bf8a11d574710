use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid argument `{field}`: {reason}")]
    InvalidArgument { field: &'static str, reason: String },

    #[error("token id {id} is outside the hash table domain of {vocab_size} ids")]
    TokenOutOfVocab { id: usize, vocab_size: usize },

    #[error("{kind} hash table requires {missing}")]
    MissingHashData {
        kind: &'static str,
        missing: &'static str,
    },

    #[error("malformed device buffers: {0}")]
    MalformedBuffers(String),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            field,
            reason: reason.into(),
        }
    }
}
