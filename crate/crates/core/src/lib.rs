pub mod broadcast;
pub mod cluster;
pub mod config;
pub mod directory;
pub mod error;
pub mod id;
pub mod node;
pub mod reduce;
pub mod replay;
pub mod sim;
pub mod store;
pub mod tcp;
pub mod trace;
pub mod wire;

pub use config::{ClusterConfig, NetworkProfile};
pub use error::{Error, Result};
pub use id::{NodeId, ObjectId};
