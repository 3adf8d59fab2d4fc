//! Reduce coordination on the caller's node.
//!
//! The coordinator subscribes to every candidate source, places sources
//! into slots in the order they become ready, keeps every slot host's view
//! of the tree current, and repairs the tree when a host fails.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::Error;
use crate::id::{NodeId, ObjectId};
use crate::node::{ClientReply, Node, Ticket};
use crate::reduce::plan::{DegreeRegistry, ReducePlan, SlotAssignment};
use crate::reduce::{ReduceOpSpec, SlotId};
use crate::trace::TraceEvent;
use crate::wire::{DirEvent, Message, ReduceAssign, SlotLink, RELEASE_EPOCH};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SourceState {
    NotReady,
    /// Ready but waiting for a vacant slot.
    Spare(NodeId),
    Assigned(NodeId),
    /// Its host failed; a restarted host may publish it again.
    Failed,
    Deleted,
}

pub(crate) struct Coordinator {
    ticket: Ticket,
    plan: ReducePlan,
    sources: BTreeMap<ObjectId, SourceState>,
    spares: VecDeque<SlotAssignment>,
    last_sent: BTreeMap<SlotId, ReduceAssign>,
    /// Every host that was ever told about a slot.
    contacted: BTreeSet<NodeId>,
}

impl Coordinator {
    fn assign_msg(&self, me: NodeId, slot: SlotId) -> Option<ReduceAssign> {
        let plan = &self.plan;
        let a = plan.assignment(slot)?;
        let link = |s: SlotId| SlotLink { slot: s, host: plan.assignment(s).map(|a| a.host), epoch: plan.epoch(s) };
        Some(ReduceAssign {
            target: plan.target,
            coordinator: me,
            slot,
            epoch: plan.epoch(slot),
            source: a.source,
            op: plan.op,
            n: plan.n(),
            d: plan.d(),
            parent: plan.shape().parent(slot).map(link),
            children: plan.shape().children(slot).iter().map(|c| link(*c)).collect(),
        })
    }

    /// Sources that have not failed for good.
    fn viable(&self) -> usize {
        self.sources.values().filter(|s| **s != SourceState::Deleted).count()
    }
}

impl Node {
    pub(crate) fn start_reduce(
        &mut self,
        ticket: Ticket,
        target: ObjectId,
        sources: Vec<ObjectId>,
        n: u32,
        op: ReduceOpSpec,
        degree: Option<u32>,
    ) {
        let mut unique = sources.clone();
        unique.sort();
        unique.dedup();
        if unique.len() != sources.len() || sources.contains(&target) {
            return self.reply(
                ticket,
                ClientReply::Failed(Error::InvalidArgument("reduce sources must be distinct from each other and the target".into())),
            );
        }
        if self.coordinators.contains_key(&target) || self.store.contains(&target) {
            return self.reply(ticket, ClientReply::Failed(Error::DuplicateObject(target)));
        }
        let d = match degree {
            Some(d) => d,
            None => match DegreeRegistry::builtin().get(&self.cfg.degree_policy) {
                Ok(p) => p.degree(op.total_size(), n, &self.cfg.network),
                Err(e) => return self.reply(ticket, ClientReply::Failed(e)),
            },
        };
        let plan = match ReducePlan::new(target, op, n, sources.len() as u32, d) {
            Ok(p) => p,
            Err(e) => return self.reply(ticket, ClientReply::Failed(e)),
        };
        if op.total_size() == 0 {
            return self.reply(ticket, ClientReply::Failed(Error::ZeroSize));
        }
        self.coordinators.insert(
            target,
            Coordinator {
                ticket,
                plan,
                sources: sources.iter().map(|s| (*s, SourceState::NotReady)).collect(),
                spares: VecDeque::new(),
                last_sent: BTreeMap::new(),
                contacted: BTreeSet::new(),
            },
        );
        for id in sources {
            self.send_dir(Message::Subscribe { id, subscriber: self.id, active: true });
        }
    }

    /// Directory events about sources of any reduce this node coordinates.
    pub(crate) fn coordinator_event(&mut self, id: ObjectId, event: DirEvent) {
        let targets: Vec<ObjectId> = self
            .coordinators
            .iter()
            .filter(|(_, c)| c.sources.contains_key(&id))
            .map(|(t, _)| *t)
            .collect();
        for target in targets {
            match event {
                DirEvent::Published { node, size, .. } => self.source_ready(target, id, node, size),
                DirEvent::Removed { node } => {
                    let c = &self.coordinators[&target];
                    match c.sources[&id] {
                        SourceState::Assigned(h) | SourceState::Spare(h) if h == node => {
                            self.host_failed(target, node)
                        }
                        _ => {}
                    }
                }
                DirEvent::Deleted => {
                    let c = self.coordinators.get_mut(&target).unwrap();
                    c.sources.insert(id, SourceState::Deleted);
                    c.spares.retain(|s| s.source != id);
                    if c.viable() < c.plan.n() as usize {
                        self.finish_reduce(target, Err(Error::Unsatisfiable(target)));
                    } else if let Some(slot) = c.plan.slot_of_source(&id) {
                        self.vacate(target, &[slot], None);
                    }
                }
                DirEvent::Reset => {}
            }
        }
    }

    fn source_ready(&mut self, target: ObjectId, id: ObjectId, node: NodeId, size: u64) {
        let c = self.coordinators.get_mut(&target).unwrap();
        if !matches!(c.sources[&id], SourceState::NotReady | SourceState::Failed) {
            return;
        }
        if let Err(reason) = c.plan.op.check_source_size(size) {
            return self.finish_reduce(target, Err(Error::TypeMismatch { id, reason }));
        }
        match c.plan.assign_next(id, node) {
            Some(slot) => {
                c.sources.insert(id, SourceState::Assigned(node));
                let epoch = c.plan.epoch(slot);
                self.trace(TraceEvent::SlotAssigned { target, slot, epoch, source: id, host: node });
                self.sync_assignments(target);
            }
            None => {
                c.sources.insert(id, SourceState::Spare(node));
                c.spares.push_back(SlotAssignment { source: id, host: node });
            }
        }
    }

    pub(crate) fn coordinators_peer_down(&mut self, peer: NodeId) {
        let targets: Vec<ObjectId> = self.coordinators.keys().copied().collect();
        for t in targets {
            self.host_failed(t, peer);
        }
    }

    fn host_failed(&mut self, target: ObjectId, host: NodeId) {
        let Some(c) = self.coordinators.get_mut(&target) else { return };
        for state in c.sources.values_mut() {
            if matches!(state, SourceState::Spare(h) if *h == host) {
                *state = SourceState::Failed;
            }
        }
        c.spares.retain(|s| s.host != host);
        let slots = c.plan.slots_on(host);
        self.vacate(target, &slots, Some(host));
    }

    /// Empties `slots`, refills them from the spares and brings every
    /// affected host up to date. `dead` is a host that can no longer be
    /// reached.
    fn vacate(&mut self, target: ObjectId, slots: &[SlotId], dead: Option<NodeId>) {
        let Some(c) = self.coordinators.get_mut(&target) else { return };
        if slots.is_empty() {
            return;
        }
        let outstanding = c
            .sources
            .values()
            .filter(|s| matches!(s, SourceState::NotReady | SourceState::Failed))
            .count()
            + slots
                .iter()
                .filter_map(|s| c.plan.assignment(*s))
                .filter(|a| c.sources[&a.source] != SourceState::Deleted)
                .count();
        let old_hosts: Vec<NodeId> = slots.iter().filter_map(|s| c.plan.assignment(*s)).map(|a| a.host).collect();
        let mut spares = std::mem::take(&mut c.spares);
        let repair = {
            let mut it = std::iter::from_fn(|| spares.pop_front());
            c.plan.repair_slots(slots, &mut it, outstanding)
        };
        c.spares = spares;
        let repair = match repair {
            Ok(r) => r,
            Err(e) => return self.finish_reduce(target, Err(e)),
        };
        let (d, n) = (c.plan.d(), c.plan.n());
        let mut notes = Vec::new();
        for ((slot, source), path) in repair.vacated.iter().zip(&repair.invalidated) {
            if c.sources[source] != SourceState::Deleted {
                c.sources.insert(*source, SourceState::Failed);
            }
            c.last_sent.remove(slot);
            notes.push(TraceEvent::Invalidate { target, failed_slot: *slot, slots: path.clone(), d, n });
        }
        let mut invalidates = Vec::new();
        for s in repair.all_invalidated() {
            if let Some(a) = c.plan.assignment(s) {
                if Some(a.host) != dead && !repair.replacements.iter().any(|(r, _)| *r == s) {
                    invalidates.push((a.host, Message::ReduceInvalidate { target, slot: s, epoch: c.plan.epoch(s) }));
                }
            }
        }
        // A reachable host that lost its slot must stop working on it.
        for ((slot, _), host) in repair.vacated.iter().zip(old_hosts) {
            if Some(host) != dead {
                invalidates.push((host, Message::ReduceInvalidate { target, slot: *slot, epoch: c.plan.epoch(*slot) }));
            }
        }
        for (slot, a) in &repair.replacements {
            c.sources.insert(a.source, SourceState::Assigned(a.host));
            notes.push(TraceEvent::SlotAssigned {
                target,
                slot: *slot,
                epoch: c.plan.epoch(*slot),
                source: a.source,
                host: a.host,
            });
        }
        for ev in notes {
            self.trace(ev);
        }
        for (h, m) in invalidates {
            self.send(h, m);
        }
        self.sync_assignments(target);
    }

    /// Sends each slot host its configuration if it changed since last sent.
    fn sync_assignments(&mut self, target: ObjectId) {
        let me = self.id;
        let c = self.coordinators.get_mut(&target).unwrap();
        let mut msgs = Vec::new();
        for slot in 0..c.plan.n() {
            let Some(a) = c.assign_msg(me, slot) else { continue };
            if c.last_sent.get(&slot) != Some(&a) {
                let host = c.plan.assignment(slot).unwrap().host;
                c.last_sent.insert(slot, a.clone());
                c.contacted.insert(host);
                msgs.push((host, Message::ReduceAssign(a)));
            }
        }
        for (h, m) in msgs {
            self.send(h, m);
        }
    }

    /// Takes the root's result only if it was computed over the tree as it
    /// currently stands; otherwise the invalidated root recomputes.
    pub(crate) fn on_reduce_report(&mut self, target: ObjectId, epoch: u32, included: Vec<ObjectId>) {
        let Some(c) = self.coordinators.get(&target) else { return };
        let root = c.plan.shape().root();
        if c.plan.epoch(root) == epoch && c.plan.assignment(root).is_some() {
            self.finish_reduce(target, Ok(included));
        }
    }

    fn finish_reduce(&mut self, target: ObjectId, result: Result<Vec<ObjectId>, Error>) {
        let Some(c) = self.coordinators.remove(&target) else { return };
        let (d, n) = (c.plan.d(), c.plan.n());
        for host in &c.contacted {
            self.send(*host, Message::ReduceInvalidate { target, slot: 0, epoch: RELEASE_EPOCH });
        }
        for id in c.sources.keys() {
            self.send_dir(Message::Subscribe { id: *id, subscriber: self.id, active: false });
        }
        match result {
            Ok(included) => {
                self.trace(TraceEvent::ReduceDone { target, included: included.clone(), d, n });
                self.reply(c.ticket, ClientReply::Reduced { target, included, d });
            }
            Err(e) => self.reply(c.ticket, ClientReply::Failed(e)),
        }
    }
}
