//! Directory shard: object locations, inline small objects, subscriptions and
//! the atomic checkout step of receiver-driven broadcast.
//!
//! A shard is a serial state machine. Every operation appends its outgoing
//! messages and trace events to an output buffer; the hosting node forwards
//! them.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use bytes::Bytes;

use crate::error::{Error, Result};
use crate::id::{NodeId, ObjectId};
use crate::trace::TraceEvent;
use crate::wire::{CheckoutResult, DirEvent, Message, RemoveKind};

#[derive(Clone, Debug, PartialEq)]
pub enum DirOut {
    Send { to: NodeId, msg: Message },
    Trace(TraceEvent),
}

/// A location eligible to serve a checkout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub node: NodeId,
    pub complete: bool,
}

/// Chooses which location a checkout grants.
pub trait SenderPolicy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Picks among `candidates`, which are sorted by node id and already
    /// exclude the requester, its dependants and `exclude`. `origin` is the
    /// first node that published the object.
    fn select(&self, candidates: &[Candidate], origin: Option<NodeId>) -> Option<NodeId>;

    /// Whether a grant takes the sender out of the record until the receiver
    /// returns it, so that one sender serves one receiver at a time.
    fn exclusive(&self) -> bool;
}

/// Complete copies first, then the lowest node id.
#[derive(Debug, Default)]
pub struct Dynamic;

impl SenderPolicy for Dynamic {
    fn name(&self) -> &'static str {
        "dynamic"
    }

    fn select(&self, candidates: &[Candidate], _origin: Option<NodeId>) -> Option<NodeId> {
        candidates
            .iter()
            .find(|c| c.complete)
            .or_else(|| candidates.first())
            .map(|c| c.node)
    }

    fn exclusive(&self) -> bool {
        true
    }
}

/// Star baseline: every receiver pulls from the creator, which serializes
/// the pulls itself.
#[derive(Debug, Default)]
pub struct CreatorOnly;

impl SenderPolicy for CreatorOnly {
    fn name(&self) -> &'static str {
        "creator_only"
    }

    /// Once the origin's copy is gone, the lowest complete copy stands in.
    fn select(&self, candidates: &[Candidate], origin: Option<NodeId>) -> Option<NodeId> {
        match origin {
            Some(o) => candidates.iter().find(|c| c.node == o),
            None => candidates.iter().find(|c| c.complete),
        }
        .map(|c| c.node)
    }

    fn exclusive(&self) -> bool {
        false
    }
}

#[derive(Clone, Default)]
pub struct SenderPolicyRegistry {
    policies: BTreeMap<&'static str, Arc<dyn SenderPolicy>>,
}

impl SenderPolicyRegistry {
    pub fn builtin() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(Dynamic));
        r.register(Arc::new(CreatorOnly));
        r
    }

    pub fn register(&mut self, policy: Arc<dyn SenderPolicy>) {
        self.policies.insert(policy.name(), policy);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn SenderPolicy>> {
        self.policies.get(name).cloned().ok_or_else(|| {
            Error::Config(format!(
                "unknown sender policy {name:?}; known: {:?}",
                self.policies.keys().collect::<Vec<_>>()
            ))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.policies.keys().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Location {
    pub complete: bool,
    /// Nodes this copy is transitively being fetched from, nearest first.
    pub chain: Vec<NodeId>,
}

#[derive(Clone, Debug)]
struct Serving {
    receiver: NodeId,
    loc: Location,
}

#[derive(Clone, Debug, Default)]
struct Record {
    size: u64,
    inline: Option<Bytes>,
    origin: Option<NodeId>,
    locations: BTreeMap<NodeId, Location>,
    /// Senders checked out by a receiver, keyed by sender.
    serving: BTreeMap<NodeId, Serving>,
    pending: VecDeque<(NodeId, Vec<NodeId>)>,
    subscribers: BTreeSet<NodeId>,
    /// Nodes already announced complete to subscribers.
    announced_complete: BTreeSet<NodeId>,
}

impl Record {
    fn loc_mut(&mut self, node: NodeId) -> Option<&mut Location> {
        match self.locations.get_mut(&node) {
            Some(l) => Some(l),
            None => self.serving.get_mut(&node).map(|s| &mut s.loc),
        }
    }

    fn loc(&self, node: NodeId) -> Option<&Location> {
        self.locations.get(&node).or_else(|| self.serving.get(&node).map(|s| &s.loc))
    }

    fn all_locs_mut(&mut self) -> impl Iterator<Item = (&NodeId, &mut Location)> {
        self.locations
            .iter_mut()
            .chain(self.serving.iter_mut().map(|(n, s)| (n, &mut s.loc)))
    }

    /// Every copy downstream of `node` inherits its new chain.
    fn propagate_chain(&mut self, node: NodeId) {
        let Some(upstream) = self.loc(node).map(|l| l.chain.clone()) else { return };
        for (_, loc) in self.all_locs_mut() {
            if let Some(i) = loc.chain.iter().position(|n| *n == node) {
                loc.chain.truncate(i + 1);
                loc.chain.extend_from_slice(&upstream);
            }
        }
    }

    fn holders(&self) -> BTreeSet<NodeId> {
        self.locations.keys().chain(self.serving.keys()).copied().collect()
    }
}

/// Public snapshot of one record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordView {
    pub size: u64,
    pub inline: bool,
    /// Locations currently eligible for checkout.
    pub locations: BTreeMap<NodeId, Location>,
    /// Checked-out senders and the receiver each one serves.
    pub serving: BTreeMap<NodeId, NodeId>,
    pub pending: Vec<NodeId>,
}

pub struct DirectoryShard {
    policy: Arc<dyn SenderPolicy>,
    records: HashMap<ObjectId, Record>,
    deleted: HashSet<ObjectId>,
}

impl DirectoryShard {
    pub fn new(policy: Arc<dyn SenderPolicy>) -> Self {
        Self { policy, records: HashMap::new(), deleted: HashSet::new() }
    }

    pub fn policy(&self) -> &dyn SenderPolicy {
        &*self.policy
    }

    pub fn view(&self, id: &ObjectId) -> Option<RecordView> {
        self.records.get(id).map(|r| RecordView {
            size: r.size,
            inline: r.inline.is_some(),
            locations: r.locations.clone(),
            serving: r.serving.iter().map(|(s, v)| (*s, v.receiver)).collect(),
            pending: r.pending.iter().map(|(n, _)| *n).collect(),
        })
    }

    pub fn is_deleted(&self, id: &ObjectId) -> bool {
        self.deleted.contains(id)
    }

    /// Applies one directory request received from `from`. Errors are
    /// returned for the caller to log; the wire protocol carries no error
    /// replies for publishes and returns.
    pub fn handle(&mut self, from: NodeId, msg: Message, out: &mut Vec<DirOut>) -> Result<()> {
        match msg {
            Message::Publish { id, node, size, complete, chain, inline } => match inline {
                Some(payload) => self.publish_inline(id, node, payload, out),
                None if complete => self.publish_complete(id, node, size, out),
                None => self.publish_partial(id, node, size, chain, out),
            },
            Message::Checkout { id, requester, exclude } => {
                self.checkout(id, requester, &exclude, out);
                Ok(())
            }
            Message::ReturnLocation {
                id,
                sender,
                sender_complete,
                sender_gone,
                receiver,
                receiver_complete,
            } => self.return_location(
                id,
                sender,
                sender_complete,
                sender_gone,
                receiver,
                receiver_complete,
                out,
            ),
            Message::Subscribe { id, subscriber, active } => {
                if active {
                    self.subscribe(id, subscriber, out);
                } else {
                    self.unsubscribe(id, subscriber);
                }
                Ok(())
            }
            Message::Remove { id, node, kind } => {
                match kind {
                    RemoveKind::Location => self.remove_location(id, node, out),
                    RemoveKind::Delete => self.delete(id, out),
                    RemoveKind::Reset => self.reset(id, node, out),
                }
                Ok(())
            }
            other => Err(Error::InvalidArgument(format!(
                "directory cannot handle message type {:#04x} from {from}",
                other.msg_type()
            ))),
        }
    }

    fn record_for_publish(&mut self, id: ObjectId, size: u64) -> Result<&mut Record> {
        if size == 0 {
            return Err(Error::ZeroSize);
        }
        if self.deleted.contains(&id) {
            return Err(Error::Deleted(id));
        }
        let rec = self.records.entry(id).or_default();
        if rec.size != 0 && rec.size != size {
            return Err(Error::SizeMismatch { id, recorded: rec.size, claimed: size });
        }
        rec.size = size;
        Ok(rec)
    }

    pub fn publish_partial(
        &mut self,
        id: ObjectId,
        node: NodeId,
        size: u64,
        mut chain: Vec<NodeId>,
        out: &mut Vec<DirOut>,
    ) -> Result<()> {
        chain.retain(|n| *n != node);
        let rec = self.record_for_publish(id, size)?;
        rec.origin.get_or_insert(node);
        match rec.loc_mut(node) {
            Some(loc) if loc.complete => {}
            Some(loc) => loc.chain = chain,
            None => {
                rec.locations.insert(node, Location { complete: false, chain });
            }
        }
        rec.propagate_chain(node);
        notify(id, rec, DirEvent::Published { node, size, complete: false }, out);
        self.wake_pending(id, out);
        Ok(())
    }

    /// Marks `node` complete. `size` may be 0 when the caller only knows the
    /// object exists.
    pub fn publish_complete(
        &mut self,
        id: ObjectId,
        node: NodeId,
        size: u64,
        out: &mut Vec<DirOut>,
    ) -> Result<()> {
        if self.deleted.contains(&id) {
            return Err(Error::Deleted(id));
        }
        let rec = self.records.get_mut(&id).ok_or(Error::UnknownObject(id))?;
        if size != 0 && rec.size != 0 && rec.size != size {
            return Err(Error::SizeMismatch { id, recorded: rec.size, claimed: size });
        }
        if rec.size == 0 {
            if size == 0 {
                return Err(Error::UnknownObject(id));
            }
            rec.size = size;
        }
        mark_complete(id, rec, node, out);
        self.wake_pending(id, out);
        Ok(())
    }

    /// Small-object fast path: the payload itself lives in the record.
    pub fn publish_inline(
        &mut self,
        id: ObjectId,
        node: NodeId,
        payload: Bytes,
        out: &mut Vec<DirOut>,
    ) -> Result<()> {
        let rec = self.record_for_publish(id, payload.len() as u64)?;
        rec.origin.get_or_insert(node);
        rec.inline = Some(payload);
        mark_complete(id, rec, node, out);
        self.wake_pending(id, out);
        Ok(())
    }

    /// Grants one sender to `requester`, or parks the request until the
    /// next publish. Replies are sent through `out`.
    pub fn checkout(
        &mut self,
        id: ObjectId,
        requester: NodeId,
        exclude: &[NodeId],
        out: &mut Vec<DirOut>,
    ) {
        let result = self.try_checkout(id, requester, exclude, out);
        if let CheckoutResult::NotYetAvailable = result {
            let rec = self.records.entry(id).or_default();
            // Excluding a node that holds nothing would also shut out its
            // next incarnation, so only current holders stay excluded.
            let exclude: Vec<NodeId> =
                exclude.iter().copied().filter(|n| rec.loc(*n).is_some()).collect();
            rec.pending.retain(|(n, _)| *n != requester);
            rec.pending.push_back((requester, exclude));
        }
        out.push(DirOut::Send {
            to: requester,
            msg: Message::CheckoutReply { id, result },
        });
    }

    fn try_checkout(
        &mut self,
        id: ObjectId,
        requester: NodeId,
        exclude: &[NodeId],
        out: &mut Vec<DirOut>,
    ) -> CheckoutResult {
        if self.deleted.contains(&id) {
            return CheckoutResult::Deleted;
        }
        let Some(rec) = self.records.get_mut(&id) else {
            return CheckoutResult::NotYetAvailable;
        };
        if let Some(payload) = &rec.inline {
            return CheckoutResult::Inline(payload.clone());
        }
        let candidates: Vec<Candidate> = rec
            .locations
            .iter()
            .filter(|(n, loc)| {
                **n != requester && !exclude.contains(n) && !loc.chain.contains(&requester)
            })
            .map(|(n, loc)| Candidate { node: *n, complete: loc.complete })
            .collect();
        let Some(sender) = self.policy.select(&candidates, rec.origin) else {
            return CheckoutResult::NotYetAvailable;
        };
        let sender_loc = rec.locations[&sender].clone();
        if self.policy.exclusive() {
            rec.locations.remove(&sender);
            rec.serving.insert(sender, Serving { receiver: requester, loc: sender_loc.clone() });
            out.push(DirOut::Trace(TraceEvent::Grant {
                id,
                sender,
                receiver: requester,
                sender_complete: sender_loc.complete,
            }));
        }
        let mut chain = vec![sender];
        chain.extend_from_slice(&sender_loc.chain);
        let size = rec.size;
        let newly_added = match rec.loc_mut(requester) {
            Some(loc) => {
                loc.chain = chain;
                false
            }
            None => {
                rec.locations.insert(requester, Location { complete: false, chain });
                true
            }
        };
        rec.propagate_chain(requester);
        if newly_added {
            notify(id, rec, DirEvent::Published { node: requester, size, complete: false }, out);
        }
        CheckoutResult::Granted { sender, size, chain: sender_loc.chain }
    }

    /// Ends a transfer: `sender` goes back into the record unless it is
    /// gone, and `receiver` is marked complete when it finished.
    #[allow(clippy::too_many_arguments)]
    pub fn return_location(
        &mut self,
        id: ObjectId,
        sender: NodeId,
        sender_complete: bool,
        sender_gone: bool,
        receiver: NodeId,
        receiver_complete: bool,
        out: &mut Vec<DirOut>,
    ) -> Result<()> {
        let rec = self.records.get_mut(&id).ok_or(Error::UnknownObject(id))?;
        if rec.serving.get(&sender).is_some_and(|s| s.receiver == receiver) {
            let mut served = rec.serving.remove(&sender).unwrap();
            out.push(DirOut::Trace(TraceEvent::Release { id, sender, receiver }));
            if !sender_gone {
                if sender_complete {
                    served.loc.complete = true;
                    served.loc.chain.clear();
                }
                rec.locations.insert(sender, served.loc);
            } else {
                notify(id, rec, DirEvent::Removed { node: sender }, out);
            }
        }
        if receiver_complete {
            mark_complete(id, rec, receiver, out);
        }
        self.wake_pending(id, out);
        Ok(())
    }

    /// Sends a snapshot of current locations, then every later event.
    pub fn subscribe(&mut self, id: ObjectId, subscriber: NodeId, out: &mut Vec<DirOut>) {
        if self.deleted.contains(&id) {
            out.push(DirOut::Send {
                to: subscriber,
                msg: Message::Event { id, event: DirEvent::Deleted },
            });
            return;
        }
        let rec = self.records.entry(id).or_default();
        rec.subscribers.insert(subscriber);
        let mut snapshot: Vec<(NodeId, bool)> = rec
            .locations
            .iter()
            .chain(rec.serving.iter().map(|(n, s)| (n, &s.loc)))
            .map(|(n, l)| (*n, l.complete))
            .collect();
        snapshot.sort();
        // The origin is reported first so that readiness order reflects it.
        if let Some(origin) = rec.origin {
            if let Some(i) = snapshot.iter().position(|(n, _)| *n == origin) {
                let o = snapshot.remove(i);
                snapshot.insert(0, o);
            }
        }
        for (node, complete) in snapshot {
            out.push(DirOut::Send {
                to: subscriber,
                msg: Message::Event {
                    id,
                    event: DirEvent::Published { node, size: rec.size, complete },
                },
            });
        }
    }

    pub fn unsubscribe(&mut self, id: ObjectId, subscriber: NodeId) {
        if let Some(rec) = self.records.get_mut(&id) {
            rec.subscribers.remove(&subscriber);
        }
    }

    pub fn remove_location(&mut self, id: ObjectId, node: NodeId, out: &mut Vec<DirOut>) {
        let Some(rec) = self.records.get_mut(&id) else { return };
        if rec.locations.remove(&node).is_some() {
            rec.announced_complete.remove(&node);
            if rec.origin == Some(node) {
                rec.origin = None;
            }
            for (_, loc) in rec.all_locs_mut() {
                if let Some(i) = loc.chain.iter().position(|n| *n == node) {
                    loc.chain.truncate(i);
                }
            }
            notify(id, rec, DirEvent::Removed { node }, out);
        }
    }

    /// Removes the object cluster-wide. Holders, subscribers and parked
    /// checkouts all learn about it.
    pub fn delete(&mut self, id: ObjectId, out: &mut Vec<DirOut>) {
        if !self.deleted.insert(id) {
            return;
        }
        let Some(rec) = self.records.remove(&id) else { return };
        let mut told: BTreeSet<NodeId> = BTreeSet::new();
        for n in rec.subscribers.iter().chain(rec.holders().iter()) {
            if told.insert(*n) {
                out.push(DirOut::Send { to: *n, msg: Message::Event { id, event: DirEvent::Deleted } });
            }
        }
        for (n, _) in rec.pending {
            out.push(DirOut::Send {
                to: n,
                msg: Message::CheckoutReply { id, result: CheckoutResult::Deleted },
            });
        }
    }

    /// Withdraws every copy except the writer's; `writer` is about to
    /// rewrite the content and republish it as its new origin.
    pub fn reset(&mut self, id: ObjectId, writer: NodeId, out: &mut Vec<DirOut>) {
        let Some(rec) = self.records.get_mut(&id) else { return };
        rec.origin = Some(writer);
        let dropped: Vec<NodeId> = rec
            .locations
            .iter()
            .chain(rec.serving.iter().map(|(n, s)| (n, &s.loc)))
            .map(|(n, _)| *n)
            .filter(|n| *n != writer)
            .collect();
        let released: Vec<(NodeId, NodeId)> =
            rec.serving.iter().map(|(s, v)| (*s, v.receiver)).collect();
        for (sender, receiver) in released {
            if dropped.contains(&sender) || dropped.contains(&receiver) {
                let served = rec.serving.remove(&sender).unwrap();
                out.push(DirOut::Trace(TraceEvent::Release { id, sender, receiver }));
                if served.loc.complete {
                    rec.locations.insert(sender, served.loc);
                }
            }
        }
        for n in &dropped {
            rec.locations.remove(n);
            rec.announced_complete.remove(n);
        }
        let mut told: BTreeSet<NodeId> = rec.subscribers.clone();
        told.extend(dropped.iter().filter(|n| **n != writer));
        for n in told {
            out.push(DirOut::Send { to: n, msg: Message::Event { id, event: DirEvent::Reset } });
        }
    }

    /// Forgets a failed node everywhere: its locations, its place in
    /// dependency chains, its parked checkouts and subscriptions.
    pub fn purge_node(&mut self, dead: NodeId, out: &mut Vec<DirOut>) {
        let mut ids: Vec<ObjectId> = self.records.keys().copied().collect();
        ids.sort();
        for id in ids {
            let rec = self.records.get_mut(&id).unwrap();
            let mut touched = false;
            rec.subscribers.remove(&dead);
            rec.pending.retain(|(n, _)| *n != dead);
            for (_, exclude) in rec.pending.iter_mut() {
                exclude.retain(|n| *n != dead);
            }
            if rec.locations.remove(&dead).is_some() {
                touched = true;
            }
            if let Some(served) = rec.serving.remove(&dead) {
                out.push(DirOut::Trace(TraceEvent::Release { id, sender: dead, receiver: served.receiver }));
                touched = true;
            }
            let orphaned: Vec<NodeId> = rec
                .serving
                .iter()
                .filter(|(_, s)| s.receiver == dead)
                .map(|(n, _)| *n)
                .collect();
            for sender in orphaned {
                let served = rec.serving.remove(&sender).unwrap();
                out.push(DirOut::Trace(TraceEvent::Release { id, sender, receiver: dead }));
                rec.locations.insert(sender, served.loc);
            }
            if touched {
                rec.announced_complete.remove(&dead);
                for (_, loc) in rec.all_locs_mut() {
                    if let Some(i) = loc.chain.iter().position(|n| *n == dead) {
                        loc.chain.truncate(i);
                    }
                }
                if rec.origin == Some(dead) {
                    rec.origin = None;
                }
                notify(id, rec, DirEvent::Removed { node: dead }, out);
            }
            self.wake_pending(id, out);
        }
    }

    /// Retries parked checkouts in arrival order.
    fn wake_pending(&mut self, id: ObjectId, out: &mut Vec<DirOut>) {
        let Some(rec) = self.records.get_mut(&id) else { return };
        if rec.pending.is_empty() {
            return;
        }
        let waiting: Vec<(NodeId, Vec<NodeId>)> = rec.pending.drain(..).collect();
        for (requester, exclude) in waiting {
            match self.try_checkout(id, requester, &exclude, out) {
                CheckoutResult::NotYetAvailable => {
                    self.records.get_mut(&id).unwrap().pending.push_back((requester, exclude));
                }
                result => out.push(DirOut::Send {
                    to: requester,
                    msg: Message::CheckoutReply { id, result },
                }),
            }
        }
    }
}

fn notify(id: ObjectId, rec: &Record, event: DirEvent, out: &mut Vec<DirOut>) {
    for s in &rec.subscribers {
        out.push(DirOut::Send { to: *s, msg: Message::Event { id, event: event.clone() } });
    }
}

fn mark_complete(id: ObjectId, rec: &mut Record, node: NodeId, out: &mut Vec<DirOut>) {
    match rec.loc_mut(node) {
        Some(loc) => {
            loc.complete = true;
            loc.chain.clear();
        }
        None => {
            rec.locations.insert(node, Location { complete: true, chain: Vec::new() });
        }
    }
    rec.propagate_chain(node);
    if rec.announced_complete.insert(node) {
        let size = rec.size;
        notify(id, rec, DirEvent::Published { node, size, complete: true }, out);
    }
}
