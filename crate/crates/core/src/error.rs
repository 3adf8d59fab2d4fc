use thiserror::Error;

use crate::id::{NodeId, ObjectId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("object {0} already exists in this store")]
    DuplicateObject(ObjectId),
    #[error("object payload must not be empty")]
    ZeroSize,
    #[error("object {0} was deleted")]
    Deleted(ObjectId),
    #[error("cannot free {needed} bytes: only {evictable} bytes are evictable")]
    InsufficientSpace { needed: u64, evictable: u64 },
    #[error("object {id} has size {recorded}, publish claimed {claimed}")]
    SizeMismatch { id: ObjectId, recorded: u64, claimed: u64 },
    #[error("no directory record for object {0}")]
    UnknownObject(ObjectId),
    #[error("peer {0} is down")]
    PeerDown(NodeId),
    #[error("sender is already serving object {0}")]
    Busy(ObjectId),
    #[error("object {0} is no longer held by the sender")]
    Gone(ObjectId),
    #[error("reduce source {id} does not match the reduce spec: {reason}")]
    TypeMismatch { id: ObjectId, reason: String },
    #[error("reduce into {0} cannot gather enough sources")]
    Unsatisfiable(ObjectId),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("malformed frame: {0}")]
    Wire(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("simulation ran out of events before the request resolved")]
    Stalled,
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
