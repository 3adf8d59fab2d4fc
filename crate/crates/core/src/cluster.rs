//! Backend-neutral handle on a running cluster.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use crate::config::ClusterConfig;
use crate::error::{Error, Result};
use crate::id::NodeId;
use crate::node::{ClientReply, ClientRequest, Ticket};
use crate::sim::Sim;
use crate::tcp::TcpCluster;
use crate::trace::TraceRecord;

pub trait Cluster {
    fn backend(&self) -> &'static str;
    fn submit(&mut self, node: NodeId, request: ClientRequest) -> Ticket;
    /// Blocks until every ticket is answered or `timeout_s` elapses, in
    /// simulated seconds for the simulator and wall-clock seconds otherwise.
    fn wait(&mut self, tickets: &[Ticket], timeout_s: f64) -> bool;
    fn reply(&self, ticket: Ticket) -> Option<ClientReply>;
    fn now(&self) -> f64;
    fn trace(&self) -> Vec<TraceRecord>;
    fn kill(&mut self, node: NodeId);
}

impl Cluster for Sim {
    fn backend(&self) -> &'static str {
        "sim"
    }
    fn submit(&mut self, node: NodeId, request: ClientRequest) -> Ticket {
        Sim::submit(self, node, request)
    }
    fn wait(&mut self, tickets: &[Ticket], timeout_s: f64) -> bool {
        let deadline = self.now() + timeout_s;
        self.run_until_replied_by(tickets, deadline)
    }
    fn reply(&self, ticket: Ticket) -> Option<ClientReply> {
        Sim::reply(self, ticket).map(|(_, r)| r.clone())
    }
    fn now(&self) -> f64 {
        Sim::now(self)
    }
    fn trace(&self) -> Vec<TraceRecord> {
        Sim::trace(self).to_vec()
    }
    fn kill(&mut self, node: NodeId) {
        self.kill_at(Sim::now(self), node);
    }
}

impl Cluster for TcpCluster {
    fn backend(&self) -> &'static str {
        "tcp"
    }
    fn submit(&mut self, node: NodeId, request: ClientRequest) -> Ticket {
        TcpCluster::submit(self, node, request)
    }
    fn wait(&mut self, tickets: &[Ticket], timeout_s: f64) -> bool {
        TcpCluster::wait(self, tickets, Duration::from_secs_f64(timeout_s))
    }
    fn reply(&self, ticket: Ticket) -> Option<ClientReply> {
        TcpCluster::reply(self, ticket).cloned()
    }
    fn now(&self) -> f64 {
        self.elapsed()
    }
    fn trace(&self) -> Vec<TraceRecord> {
        TcpCluster::trace(self)
    }
    fn kill(&mut self, node: NodeId) {
        TcpCluster::kill(self, node);
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;
    fn open(&self, cfg: ClusterConfig) -> Result<Box<dyn Cluster>>;
}

struct SimBackend;

impl Backend for SimBackend {
    fn name(&self) -> &'static str {
        "sim"
    }
    fn open(&self, cfg: ClusterConfig) -> Result<Box<dyn Cluster>> {
        Ok(Box::new(Sim::new(cfg)?))
    }
}

struct TcpBackend;

impl Backend for TcpBackend {
    fn name(&self) -> &'static str {
        "tcp"
    }
    fn open(&self, cfg: ClusterConfig) -> Result<Box<dyn Cluster>> {
        Ok(Box::new(TcpCluster::start(cfg)?))
    }
}

#[derive(Clone, Default)]
pub struct BackendRegistry {
    backends: BTreeMap<&'static str, Arc<dyn Backend>>,
}

impl BackendRegistry {
    pub fn builtin() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(SimBackend));
        r.register(Arc::new(TcpBackend));
        r
    }

    pub fn register(&mut self, backend: Arc<dyn Backend>) {
        self.backends.insert(backend.name(), backend);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Backend>> {
        self.backends
            .get(name)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown backend {name:?}")))
    }

    /// Opens a cluster on the backend named in `cfg`.
    pub fn open(&self, cfg: ClusterConfig) -> Result<Box<dyn Cluster>> {
        self.get(&cfg.backend.clone())?.open(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::ObjectId;
    use bytes::Bytes;

    #[test]
    fn both_backends_roundtrip() {
        for backend in ["sim", "tcp"] {
            let mut cfg = ClusterConfig::default().with_node_count(3);
            cfg.backend = backend.into();
            let mut c = BackendRegistry::builtin().open(cfg).unwrap();
            assert_eq!(c.backend(), backend);
            let id = ObjectId::from_name("x");
            let p = c.submit(NodeId(2), ClientRequest::Put { id, payload: Bytes::from(vec![7u8; 200_000]) });
            let g = c.submit(NodeId(1), ClientRequest::Get { id, read_only: false });
            assert!(c.wait(&[p, g], 10.0), "{backend}");
            match c.reply(g).unwrap() {
                ClientReply::Object(o) => assert_eq!(o.as_slice(), &[7u8; 200_000][..]),
                other => panic!("{other:?}"),
            }
        }
        assert!(BackendRegistry::builtin().get("carrier-pigeon").is_err());
    }
}
