//! The built-in scenarios. Sizes are decimal (1 MB = 10^6 bytes).

use relaystore::ClusterConfig;

use crate::ScenarioRegistry;

mod collective;
mod faults;
mod primitives;

pub use collective::{AblationD, Allreduce, Reduce, Staggered};
pub use faults::{FaultBroadcast, FaultReduce};
pub use primitives::{Broadcast, Gather, Rtt};

pub const KB: u64 = 1_000;
pub const MB: u64 = 1_000_000;

pub(crate) fn register_all(r: &mut ScenarioRegistry) {
    r.register(Box::new(Rtt));
    r.register(Box::new(Broadcast));
    r.register(Box::new(Gather));
    r.register(Box::new(Reduce));
    r.register(Box::new(Allreduce));
    r.register(Box::new(Staggered));
    r.register(Box::new(FaultBroadcast));
    r.register(Box::new(FaultReduce));
    r.register(Box::new(AblationD));
}

/// Seconds to move `bytes` at the configured bandwidth.
pub(crate) fn xfer(cfg: &ClusterConfig, bytes: u64) -> f64 {
    bytes as f64 / cfg.network.bandwidth_bps
}

/// `max / min - 1` over the values.
pub(crate) fn spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    let min = values.iter().copied().fold(f64::MAX, f64::min);
    max / min - 1.0
}
