//! Cluster configuration, loaded from TOML.
//!
//! ```toml
//! backend = "sim"
//! node_count = 8
//! shard_count = 1
//! block_size = 262144
//! small_object_threshold = 65536
//! detection_interval_s = 0.01
//!
//! [network]
//! latency_s = 0.001
//! bandwidth_bps = 1e9
//! ```
//!
//! For the TCP backend list nodes explicitly with their listen addresses:
//!
//! ```toml
//! [[nodes]]
//! id = 0
//! addr = "127.0.0.1:7400"
//! ```

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::id::{NodeId, ObjectId};

pub const DEFAULT_BLOCK_SIZE: u64 = 4 * 1024 * 1024;
pub const DEFAULT_SMALL_OBJECT_THRESHOLD: u64 = 64 * 1024;

/// Link latency and bandwidth shared by the simulator and the reduce
/// latency model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkProfile {
    /// One-way latency of a message hop, in seconds.
    pub latency_s: f64,
    /// Bytes per second a node can send, and receive.
    pub bandwidth_bps: f64,
}

impl NetworkProfile {
    pub fn new(latency_s: f64, bandwidth_bps: f64) -> Result<Self> {
        let p = Self { latency_s, bandwidth_bps };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err(Error::Config(format!("latency_s must be >= 0, got {}", self.latency_s)));
        }
        if !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) {
            return Err(Error::Config(format!(
                "bandwidth_bps must be > 0, got {}",
                self.bandwidth_bps
            )));
        }
        Ok(())
    }

    /// Seconds to push `bytes` through one link, excluding latency.
    pub fn transmit_s(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bandwidth_bps
    }
}

impl Default for NetworkProfile {
    fn default() -> Self {
        Self { latency_s: 0.001, bandwidth_bps: 1e9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: u32,
    #[serde(default)]
    pub addr: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    #[serde(default = "default_backend")]
    pub backend: String,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    /// Shorthand for `nodes` with ids `0..node_count` and no addresses.
    #[serde(default)]
    pub node_count: Option<u32>,
    #[serde(default)]
    pub network: NetworkProfile,
    #[serde(default = "default_shard_count")]
    pub shard_count: u32,
    /// Node hosting each directory shard. Defaults to `shard % node_count`.
    #[serde(default)]
    pub shard_hosts: Option<Vec<u32>>,
    #[serde(default = "default_block_size")]
    pub block_size: u64,
    #[serde(default = "default_threshold")]
    pub small_object_threshold: u64,
    #[serde(default = "default_detection")]
    pub detection_interval_s: f64,
    /// Delay before a receiver turned away by a busy sender checks out again.
    #[serde(default = "default_busy_retry")]
    pub busy_retry_s: f64,
    /// Rate at which `put` copies a payload into the store. Unset means the
    /// copy is instantaneous.
    #[serde(default)]
    pub copy_bandwidth_bps: Option<f64>,
    /// Name of the registered sender-selection policy.
    #[serde(default = "default_sender_policy")]
    pub sender_policy: String,
    /// Name of the registered reduce degree policy.
    #[serde(default = "default_degree_policy")]
    pub degree_policy: String,
}

fn default_backend() -> String {
    "sim".to_string()
}
fn default_shard_count() -> u32 {
    1
}
fn default_block_size() -> u64 {
    DEFAULT_BLOCK_SIZE
}
fn default_threshold() -> u64 {
    DEFAULT_SMALL_OBJECT_THRESHOLD
}
fn default_detection() -> f64 {
    0.1
}
fn default_busy_retry() -> f64 {
    0.001
}
fn default_sender_policy() -> String {
    "dynamic".to_string()
}
fn default_degree_policy() -> String {
    "auto".to_string()
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            backend: default_backend(),
            nodes: Vec::new(),
            node_count: Some(4),
            network: NetworkProfile::default(),
            shard_count: default_shard_count(),
            shard_hosts: None,
            block_size: DEFAULT_BLOCK_SIZE,
            small_object_threshold: DEFAULT_SMALL_OBJECT_THRESHOLD,
            detection_interval_s: default_detection(),
            busy_retry_s: default_busy_retry(),
            copy_bandwidth_bps: None,
            sender_policy: default_sender_policy(),
            degree_policy: default_degree_policy(),
        }
    }
}

impl ClusterConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: ClusterConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.normalize()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Fills `nodes` from `node_count` and checks every field.
    pub fn normalize(&mut self) -> Result<()> {
        match (self.nodes.is_empty(), self.node_count) {
            (true, Some(n)) => {
                self.nodes = (0..n).map(|id| NodeSpec { id, addr: None }).collect();
            }
            (true, None) => return Err(Error::Config("no nodes configured".into())),
            (false, Some(n)) if n as usize != self.nodes.len() => {
                return Err(Error::Config(format!(
                    "node_count = {n} disagrees with {} listed nodes",
                    self.nodes.len()
                )))
            }
            _ => {}
        }
        self.node_count = Some(self.nodes.len() as u32);
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id as usize != i {
                return Err(Error::Config(format!(
                    "node ids must be 0..{} in order; found {} at position {i}",
                    self.nodes.len(),
                    n.id
                )));
            }
        }
        self.network.validate()?;
        if self.shard_count == 0 {
            return Err(Error::Config("shard_count must be >= 1".into()));
        }
        if let Some(hosts) = &self.shard_hosts {
            if hosts.len() != self.shard_count as usize {
                return Err(Error::Config("shard_hosts must list one node per shard".into()));
            }
            if let Some(bad) = hosts.iter().find(|h| **h as usize >= self.nodes.len()) {
                return Err(Error::Config(format!("shard host {bad} is not a configured node")));
            }
        }
        if self.block_size == 0 || !self.block_size.is_multiple_of(8) {
            return Err(Error::Config("block_size must be a positive multiple of 8".into()));
        }
        if !(self.detection_interval_s >= 0.0) || !(self.busy_retry_s > 0.0) {
            return Err(Error::Config("intervals must be non-negative".into()));
        }
        if let Some(bw) = self.copy_bandwidth_bps {
            if !(bw > 0.0) {
                return Err(Error::Config("copy_bandwidth_bps must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Returns a copy resized to `n` nodes with addresses dropped.
    pub fn with_node_count(&self, n: u32) -> Self {
        let mut cfg = self.clone();
        cfg.nodes = (0..n).map(|id| NodeSpec { id, addr: None }).collect();
        cfg.node_count = Some(n);
        if let Some(hosts) = &mut cfg.shard_hosts {
            for h in hosts.iter_mut() {
                *h %= n;
            }
        }
        cfg
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().map(|n| NodeId(n.id))
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn shard_of(&self, id: &ObjectId) -> u32 {
        (id.stable_hash() % u64::from(self.shard_count)) as u32
    }

    pub fn shard_host(&self, shard: u32) -> NodeId {
        match &self.shard_hosts {
            Some(hosts) => NodeId(hosts[shard as usize]),
            None => NodeId(shard % self.nodes.len() as u32),
        }
    }

    /// Node hosting the directory record of `id`.
    pub fn directory_for(&self, id: &ObjectId) -> NodeId {
        self.shard_host(self.shard_of(id))
    }

    pub fn shards_hosted_by(&self, node: NodeId) -> Vec<u32> {
        (0..self.shard_count).filter(|s| self.shard_host(*s) == node).collect()
    }

    pub fn detection_interval(&self) -> Duration {
        Duration::from_secs_f64(self.detection_interval_s)
    }

    pub fn busy_retry(&self) -> Duration {
        Duration::from_secs_f64(self.busy_retry_s)
    }

    pub fn is_small(&self, size: u64) -> bool {
        size < self.small_object_threshold
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_config() {
        let cfg = ClusterConfig::from_toml_str(
            "node_count = 3\n[network]\nlatency_s = 0.002\nbandwidth_bps = 1.25e9\n",
        )
        .unwrap();
        assert_eq!(cfg.num_nodes(), 3);
        assert_eq!(cfg.block_size, DEFAULT_BLOCK_SIZE);
        assert_eq!(cfg.small_object_threshold, 65536);
        assert_eq!(cfg.detection_interval(), Duration::from_millis(100));
        assert_eq!(cfg.network.latency_s, 0.002);
        assert_eq!(cfg.sender_policy, "dynamic");
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ClusterConfig::from_toml_str("node_count = 2\nblock_size = 7\n").is_err());
        assert!(ClusterConfig::from_toml_str("node_count = 2\nshard_count = 0\n").is_err());
        assert!(ClusterConfig::from_toml_str(
            "node_count = 2\n[network]\nlatency_s = 0.0\nbandwidth_bps = 0.0\n"
        )
        .is_err());
        assert!(ClusterConfig::from_toml_str("").is_err());
        assert!(ClusterConfig::from_toml_str("node_count = 2\nbogus = 1\n").is_err());
    }

    #[test]
    fn explicit_nodes_and_shard_hosts() {
        let cfg = ClusterConfig::from_toml_str(
            r#"
            shard_count = 2
            shard_hosts = [1, 1]
            [[nodes]]
            id = 0
            addr = "127.0.0.1:7000"
            [[nodes]]
            id = 1
            addr = "127.0.0.1:7001"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.shard_host(0), NodeId(1));
        assert_eq!(cfg.shards_hosted_by(NodeId(1)), vec![0, 1]);
        assert!(cfg.shards_hosted_by(NodeId(0)).is_empty());
    }

    #[test]
    fn roundtrips_through_toml() {
        let mut cfg = ClusterConfig::default();
        cfg.normalize().unwrap();
        let again = ClusterConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, again);
    }
}
