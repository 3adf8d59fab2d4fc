//! The per-node protocol state machine.
//!
//! A [`Node`] owns one object store, the directory shards assigned to it,
//! its in-flight fetches and serves, and any reduce slots or coordinators it
//! hosts. It performs no I/O: runtimes feed it [`Input`]s and carry out the
//! [`Effect`]s it returns. The simulator and the TCP runtime both drive the
//! same code.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;

use crate::broadcast::{Fetch, Serve};
use crate::config::ClusterConfig;
use crate::directory::{DirOut, DirectoryShard, SenderPolicyRegistry};
use crate::error::{Error, Result};
use crate::id::{NodeId, ObjectId};
use crate::reduce::coordinator::Coordinator;
use crate::reduce::executor::SlotExecutor;
use crate::reduce::{ReduceOpSpec, SlotId};
use crate::store::ObjectStore;
use crate::trace::TraceEvent;
use crate::wire::{DirEvent, Message, RemoveKind};

pub type Ticket = u64;

#[derive(Clone, Debug, PartialEq)]
pub enum ClientRequest {
    Put { id: ObjectId, payload: Bytes },
    /// Blocks until a complete local copy exists.
    Get { id: ObjectId, read_only: bool },
    Delete { id: ObjectId },
    /// Reduces the first `n` of `sources` to become ready into `target`.
    /// `degree` overrides the configured degree policy.
    Reduce {
        target: ObjectId,
        sources: Vec<ObjectId>,
        n: u32,
        op: ReduceOpSpec,
        degree: Option<u32>,
    },
    Evict { bytes_needed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GetOutput {
    /// Zero-copy view into the store.
    View(Bytes),
    Copy(Vec<u8>),
}

impl GetOutput {
    pub fn as_slice(&self) -> &[u8] {
        match self {
            GetOutput::View(b) => b,
            GetOutput::Copy(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClientReply {
    Done,
    Object(GetOutput),
    Reduced { target: ObjectId, included: Vec<ObjectId>, d: u32 },
    Evicted { freed: u64, dropped: Vec<ObjectId> },
    Failed(Error),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Deliver { from: NodeId, msg: Message },
    /// The runtime lost contact with `NodeId`.
    PeerDown(NodeId),
    Timer(u64),
    Client { ticket: Ticket, request: ClientRequest },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Effect {
    Send { to: NodeId, msg: Message },
    Timer { after: Duration, token: u64 },
    Reply { ticket: Ticket, reply: ClientReply },
    Trace(TraceEvent),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum TimerKind {
    Retry(ObjectId),
    CopyBlock(ObjectId),
}

/// A put whose payload is still being copied into the store.
pub(crate) struct PutCopy {
    pub payload: Bytes,
    pub ticket: Ticket,
}

pub struct Node {
    pub(crate) id: NodeId,
    pub(crate) cfg: Arc<ClusterConfig>,
    pub(crate) store: ObjectStore,
    pub(crate) shards: BTreeMap<u32, DirectoryShard>,
    pub(crate) exclusive_senders: bool,
    pub(crate) fetches: BTreeMap<ObjectId, Fetch>,
    pub(crate) serves: BTreeMap<ObjectId, Serve>,
    pub(crate) waiters: BTreeMap<ObjectId, Vec<(Ticket, bool)>>,
    pub(crate) copies: BTreeMap<ObjectId, PutCopy>,
    pub(crate) deleted: BTreeSet<ObjectId>,
    pub(crate) coordinators: BTreeMap<ObjectId, Coordinator>,
    pub(crate) executors: BTreeMap<(ObjectId, SlotId), SlotExecutor>,
    pub(crate) released: BTreeSet<ObjectId>,
    timers: BTreeMap<u64, TimerKind>,
    next_token: u64,
    pub(crate) out: Vec<Effect>,
}

impl Node {
    pub fn new(id: NodeId, cfg: Arc<ClusterConfig>) -> Result<Self> {
        Self::with_policies(id, cfg, &SenderPolicyRegistry::builtin())
    }

    pub fn with_policies(
        id: NodeId,
        cfg: Arc<ClusterConfig>,
        policies: &SenderPolicyRegistry,
    ) -> Result<Self> {
        if id.index() >= cfg.num_nodes() {
            return Err(Error::Config(format!("{id} is not a configured node")));
        }
        let policy = policies.get(&cfg.sender_policy)?;
        let shards = cfg
            .shards_hosted_by(id)
            .into_iter()
            .map(|s| (s, DirectoryShard::new(policy.clone())))
            .collect();
        Ok(Self {
            id,
            exclusive_senders: policy.exclusive(),
            cfg,
            store: ObjectStore::new(),
            shards,
            fetches: BTreeMap::new(),
            serves: BTreeMap::new(),
            waiters: BTreeMap::new(),
            copies: BTreeMap::new(),
            deleted: BTreeSet::new(),
            coordinators: BTreeMap::new(),
            executors: BTreeMap::new(),
            released: BTreeSet::new(),
            timers: BTreeMap::new(),
            next_token: 0,
            out: Vec::new(),
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ObjectStore {
        &self.store
    }

    pub fn shard(&self, shard: u32) -> Option<&DirectoryShard> {
        self.shards.get(&shard)
    }

    /// Number of objects with an in-progress fetch on this node.
    pub fn active_fetches(&self) -> usize {
        self.fetches.len()
    }

    /// Processes one input and returns the resulting effects.
    pub fn handle(&mut self, input: Input) -> Vec<Effect> {
        match input {
            Input::Deliver { from, msg } => self.on_message(from, msg),
            Input::PeerDown(peer) => self.on_peer_down(peer),
            Input::Timer(token) => {
                if let Some(kind) = self.timers.remove(&token) {
                    match kind {
                        TimerKind::Retry(id) => self.on_retry(id),
                        TimerKind::CopyBlock(id) => self.copy_next_block(id),
                    }
                }
            }
            Input::Client { ticket, request } => self.on_client(ticket, request),
        }
        std::mem::take(&mut self.out)
    }

    pub(crate) fn send(&mut self, to: NodeId, msg: Message) {
        self.out.push(Effect::Send { to, msg });
    }

    pub(crate) fn send_dir(&mut self, msg: Message) {
        let id = msg.object().expect("directory messages name an object");
        let to = self.cfg.directory_for(&id);
        self.send(to, msg);
    }

    pub(crate) fn trace(&mut self, ev: TraceEvent) {
        self.out.push(Effect::Trace(ev));
    }

    pub(crate) fn reply(&mut self, ticket: Ticket, reply: ClientReply) {
        self.out.push(Effect::Reply { ticket, reply });
    }

    pub(crate) fn set_timer(&mut self, after: Duration, kind: TimerKind) {
        let token = self.next_token;
        self.next_token += 1;
        self.timers.insert(token, kind);
        self.out.push(Effect::Timer { after, token });
    }

    pub(crate) fn block_size(&self) -> u64 {
        self.cfg.block_size
    }

    fn on_message(&mut self, from: NodeId, msg: Message) {
        match msg {
            Message::Hello { .. } => {}
            Message::Publish { .. }
            | Message::Checkout { .. }
            | Message::ReturnLocation { .. }
            | Message::Subscribe { .. }
            | Message::Remove { .. } => self.on_directory_request(from, msg),
            Message::CheckoutReply { id, result } => self.on_checkout_reply(id, result),
            Message::Pull { id, start_offset } => self.on_pull(from, id, start_offset),
            Message::Chunk { id, offset, total_size, data } => {
                self.on_chunk(from, id, offset, total_size, data)
            }
            Message::Complete { id, sender_complete } => {
                self.on_transfer_complete(from, id, sender_complete)
            }
            Message::Abort { id, reason } => self.on_abort(from, id, reason),
            Message::Event { id, event } => self.on_dir_event(id, event),
            Message::ReduceAssign(a) => self.on_reduce_assign(a),
            Message::ReduceChunk { target, from_slot, to_slot, epoch, offset, sources, data } => {
                if to_slot == crate::wire::REPORT_SLOT {
                    self.on_reduce_report(target, epoch, sources);
                } else {
                    self.on_reduce_chunk(target, from_slot, to_slot, epoch, offset, sources, data);
                }
            }
            Message::ReduceInvalidate { target, slot, epoch } => {
                self.on_reduce_invalidate(target, slot, epoch)
            }
        }
    }

    fn on_directory_request(&mut self, from: NodeId, msg: Message) {
        let id = msg.object().expect("directory messages name an object");
        let shard_no = self.cfg.shard_of(&id);
        let Some(shard) = self.shards.get_mut(&shard_no) else { return };
        let mut outs = Vec::new();
        // Rejected publishes and returns have no reply on the wire.
        let _ = shard.handle(from, msg, &mut outs);
        self.push_dir_outs(outs);
    }

    fn push_dir_outs(&mut self, outs: Vec<DirOut>) {
        for o in outs {
            match o {
                DirOut::Send { to, msg } => self.send(to, msg),
                DirOut::Trace(ev) => self.trace(ev),
            }
        }
    }

    fn on_peer_down(&mut self, peer: NodeId) {
        let mut outs = Vec::new();
        for shard in self.shards.values_mut() {
            shard.purge_node(peer, &mut outs);
        }
        self.push_dir_outs(outs);
        self.fetches_peer_down(peer);
        self.serves_peer_down(peer);
        self.coordinators_peer_down(peer);
    }

    fn on_client(&mut self, ticket: Ticket, request: ClientRequest) {
        match request {
            ClientRequest::Put { id, payload } => self.client_put(ticket, id, payload),
            ClientRequest::Get { id, read_only } => self.client_get(ticket, id, read_only),
            ClientRequest::Delete { id } => {
                self.send_dir(Message::Remove { id, node: self.id, kind: RemoveKind::Delete });
                self.reply(ticket, ClientReply::Done);
            }
            ClientRequest::Reduce { target, sources, n, op, degree } => {
                self.start_reduce(ticket, target, sources, n, op, degree)
            }
            ClientRequest::Evict { bytes_needed } => self.client_evict(ticket, bytes_needed),
        }
    }

    fn client_put(&mut self, ticket: Ticket, id: ObjectId, payload: Bytes) {
        if payload.is_empty() {
            return self.reply(ticket, ClientReply::Failed(Error::ZeroSize));
        }
        if self.store.contains(&id) || self.copies.contains_key(&id) {
            return self.reply(ticket, ClientReply::Failed(Error::DuplicateObject(id)));
        }
        let size = payload.len() as u64;
        if self.cfg.is_small(size) {
            self.store.put(id, payload.clone(), true).expect("checked above");
            self.send_dir(Message::Publish {
                id,
                node: self.id,
                size,
                complete: true,
                chain: Vec::new(),
                inline: Some(payload),
            });
            self.on_local_complete(id);
            return self.reply(ticket, ClientReply::Done);
        }
        self.store.create_for_write(id, size, true).expect("checked above");
        self.send_dir(Message::Publish {
            id,
            node: self.id,
            size,
            complete: false,
            chain: Vec::new(),
            inline: None,
        });
        self.copies.insert(id, PutCopy { payload, ticket });
        match self.cfg.copy_bandwidth_bps {
            Some(bw) => {
                let len = self.block_size().min(size);
                self.set_timer(Duration::from_secs_f64(len as f64 / bw), TimerKind::CopyBlock(id));
            }
            None => {
                while self.copies.contains_key(&id) {
                    self.copy_next_block(id);
                }
            }
        }
    }

    /// Copies one pipeline block of a pending put into the store.
    fn copy_next_block(&mut self, id: ObjectId) {
        let Some(copy) = self.copies.get(&id) else { return };
        let Some(mut w) = self.store.writer(&id) else {
            self.copies.remove(&id);
            return;
        };
        let total = copy.payload.len() as u64;
        let off = w.watermark();
        let end = (off + self.cfg.block_size).min(total);
        let block = copy.payload.slice(off as usize..end as usize);
        let wm = w.write(block).expect("block lies within the entry");
        self.on_local_progress(id);
        if wm == total {
            let copy = self.copies.remove(&id).unwrap();
            self.send_dir(Message::Publish {
                id,
                node: self.id,
                size: total,
                complete: true,
                chain: Vec::new(),
                inline: None,
            });
            self.on_local_complete(id);
            self.reply(copy.ticket, ClientReply::Done);
        } else if let Some(bw) = self.cfg.copy_bandwidth_bps {
            let len = self.cfg.block_size.min(total - wm);
            self.set_timer(Duration::from_secs_f64(len as f64 / bw), TimerKind::CopyBlock(id));
        }
    }

    fn client_get(&mut self, ticket: Ticket, id: ObjectId, read_only: bool) {
        if self.store.is_complete(&id) {
            let out = self.read_out(id, read_only);
            return self.reply(ticket, ClientReply::Object(out));
        }
        if self.deleted.contains(&id) {
            return self.reply(ticket, ClientReply::Failed(Error::Deleted(id)));
        }
        self.waiters.entry(id).or_default().push((ticket, read_only));
        if !self.fetches.contains_key(&id) && !self.writes_locally(&id) {
            self.start_fetch(id);
        }
    }

    fn read_out(&mut self, id: ObjectId, read_only: bool) -> GetOutput {
        self.store.touch(&id);
        let view = self.store.view(&id).expect("entry is complete");
        if read_only {
            GetOutput::View(view)
        } else {
            GetOutput::Copy(view.to_vec())
        }
    }

    /// True while a local put copy or reduce root is producing `id`.
    pub(crate) fn writes_locally(&self, id: &ObjectId) -> bool {
        self.copies.contains_key(id) || self.executors.values().any(|e| e.writes_target(id))
    }

    fn client_evict(&mut self, ticket: Ticket, bytes_needed: u64) {
        let busy: BTreeSet<ObjectId> = self
            .serves
            .keys()
            .chain(self.fetches.keys())
            .copied()
            .chain(self.executors.values().filter_map(|e| e.source()))
            .chain(self.executors.keys().map(|(t, _)| *t))
            .collect();
        match self.store.evict_unpinned(bytes_needed, |id| busy.contains(id)) {
            Ok((freed, dropped)) => {
                for id in &dropped {
                    self.trace(TraceEvent::CopyDropped { id: *id, watermark: 0 });
                    self.send_dir(Message::Remove { id: *id, node: self.id, kind: RemoveKind::Location });
                }
                self.reply(ticket, ClientReply::Evicted { freed, dropped });
            }
            Err(e) => self.reply(ticket, ClientReply::Failed(e)),
        }
    }

    /// Called whenever bytes were appended to a local entry.
    pub(crate) fn on_local_progress(&mut self, id: ObjectId) {
        self.pump(id);
        let slots: Vec<(ObjectId, SlotId)> = self
            .executors
            .iter()
            .filter(|(_, e)| e.source() == Some(id))
            .map(|(k, _)| *k)
            .collect();
        for key in slots {
            self.advance_slot(key);
        }
    }

    /// Called once a local entry became complete.
    pub(crate) fn on_local_complete(&mut self, id: ObjectId) {
        let Some(waiting) = self.waiters.remove(&id) else { return };
        for (ticket, read_only) in waiting {
            let out = self.read_out(id, read_only);
            self.reply(ticket, ClientReply::Object(out));
        }
    }

    /// Drops a local copy, telling downstream receivers why.
    pub(crate) fn drop_copy(&mut self, id: ObjectId, reason: crate::wire::AbortReason) {
        if let Some(info) = self.store.info(&id) {
            self.store.remove(&id);
            self.trace(TraceEvent::CopyDropped { id, watermark: info.watermark });
        }
        self.abort_serves(id, reason);
    }

    fn on_dir_event(&mut self, id: ObjectId, event: DirEvent) {
        match &event {
            DirEvent::Deleted => self.on_deleted(id),
            DirEvent::Reset => self.on_reset(id),
            DirEvent::Published { .. } | DirEvent::Removed { .. } => {}
        }
        self.coordinator_event(id, event);
    }

    pub(crate) fn on_deleted(&mut self, id: ObjectId) {
        self.deleted.insert(id);
        self.fetches.remove(&id);
        self.drop_copy(id, crate::wire::AbortReason::Deleted);
        if let Some(copy) = self.copies.remove(&id) {
            self.reply(copy.ticket, ClientReply::Done);
        }
        for (ticket, _) in self.waiters.remove(&id).unwrap_or_default() {
            self.reply(ticket, ClientReply::Failed(Error::Deleted(id)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: u32) -> Arc<ClusterConfig> {
        Arc::new(ClusterConfig::default().with_node_count(n))
    }

    fn sends(effects: &[Effect]) -> Vec<(NodeId, Message)> {
        effects
            .iter()
            .filter_map(|e| match e {
                Effect::Send { to, msg } => Some((*to, msg.clone())),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn small_put_goes_inline_and_get_is_local() {
        let mut node = Node::new(NodeId(1), cfg(2)).unwrap();
        let id = ObjectId::from_name("tiny");
        let fx = node.handle(Input::Client {
            ticket: 1,
            request: ClientRequest::Put { id, payload: Bytes::from_static(b"abc") },
        });
        let s = sends(&fx);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].0, node.config().directory_for(&id));
        assert!(matches!(&s[0].1, Message::Publish { inline: Some(p), complete: true, .. } if p == "abc"));
        assert!(fx.contains(&Effect::Reply { ticket: 1, reply: ClientReply::Done }));

        let fx = node.handle(Input::Client { ticket: 2, request: ClientRequest::Get { id, read_only: true } });
        assert_eq!(
            fx,
            vec![Effect::Reply {
                ticket: 2,
                reply: ClientReply::Object(GetOutput::View(Bytes::from_static(b"abc")))
            }]
        );
    }

    #[test]
    fn put_rejects_duplicates_and_empty() {
        let mut node = Node::new(NodeId(0), cfg(1)).unwrap();
        let id = ObjectId::from_name("a");
        let put = |p: &'static [u8]| Input::Client {
            ticket: 9,
            request: ClientRequest::Put { id, payload: Bytes::from_static(p) },
        };
        node.handle(put(b"x"));
        let fx = node.handle(put(b"y"));
        assert!(fx.contains(&Effect::Reply {
            ticket: 9,
            reply: ClientReply::Failed(Error::DuplicateObject(id))
        }));
        let fx = node.handle(put(b""));
        assert!(fx.contains(&Effect::Reply { ticket: 9, reply: ClientReply::Failed(Error::ZeroSize) }));
    }

    #[test]
    fn large_put_publishes_partial_then_complete() {
        let mut c = ClusterConfig::default().with_node_count(2);
        c.block_size = 1 << 16;
        let mut node = Node::new(NodeId(1), Arc::new(c)).unwrap();
        let id = ObjectId::from_name("big");
        let fx = node.handle(Input::Client {
            ticket: 1,
            request: ClientRequest::Put { id, payload: Bytes::from(vec![7u8; 200_000]) },
        });
        let flags: Vec<bool> = sends(&fx)
            .into_iter()
            .filter_map(|(_, m)| match m {
                Message::Publish { complete, inline: None, .. } => Some(complete),
                _ => None,
            })
            .collect();
        assert_eq!(flags, vec![false, true]);
        assert!(node.store().is_complete(&id));
    }

    #[test]
    fn paced_put_acks_after_last_block() {
        let mut c = ClusterConfig::default().with_node_count(1);
        c.block_size = 1000;
        c.copy_bandwidth_bps = Some(1e6);
        let mut node = Node::new(NodeId(0), Arc::new(c)).unwrap();
        let id = ObjectId::from_name("paced");
        let fx = node.handle(Input::Client {
            ticket: 4,
            request: ClientRequest::Put { id, payload: Bytes::from(vec![1u8; 70_000]) },
        });
        let mut token = fx
            .iter()
            .find_map(|e| match e {
                Effect::Timer { token, after } => {
                    assert_eq!(*after, Duration::from_millis(1));
                    Some(*token)
                }
                _ => None,
            })
            .unwrap();
        let mut blocks = 0;
        loop {
            let fx = node.handle(Input::Timer(token));
            blocks += 1;
            if fx.contains(&Effect::Reply { ticket: 4, reply: ClientReply::Done }) {
                break;
            }
            assert_eq!(node.store().watermark(&id), Some(blocks * 1000));
            token = fx
                .iter()
                .find_map(|e| match e {
                    Effect::Timer { token, .. } => Some(*token),
                    _ => None,
                })
                .unwrap();
        }
        assert_eq!(blocks, 70);
    }

    #[test]
    fn rejects_unknown_node_and_policy() {
        assert!(Node::new(NodeId(5), cfg(2)).is_err());
        let mut c = ClusterConfig::default().with_node_count(2);
        c.sender_policy = "nope".into();
        assert!(Node::new(NodeId(0), Arc::new(c)).is_err());
    }
}
