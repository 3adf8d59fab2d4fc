//! Per-slot streaming aggregation.
//!
//! A slot runs on the node holding its source. Block `i` of the slot's
//! aggregate combines block `i` of the local source with block `i` of every
//! child's aggregate at the epoch the coordinator expects. Aggregates are
//! streamed to the parent slot as they are produced and kept, so a new
//! parent host can be caught up without recomputing the subtree. The root
//! writes the aggregate into the target object instead.

use std::collections::BTreeMap;

use bytes::Bytes;

use crate::id::{NodeId, ObjectId};
use crate::node::Node;
use crate::reduce::SlotId;
use crate::trace::TraceEvent;
use crate::wire::{AbortReason, Message, ReduceAssign, RemoveKind, RELEASE_EPOCH, REPORT_SLOT};

type Block = (Bytes, Vec<ObjectId>);

#[derive(Debug, Default)]
pub(crate) struct SlotExecutor {
    /// `None` until the first assignment arrives; chunks are buffered.
    cfg: Option<ReduceAssign>,
    epoch: u32,
    /// Child aggregates keyed by (child slot, child epoch), then offset.
    inbox: BTreeMap<(SlotId, u32), BTreeMap<u64, Block>>,
    emitted: Vec<(u64, Block)>,
    next: u64,
    sent_to_parent: usize,
    target_started: bool,
    done: bool,
}

impl SlotExecutor {
    pub fn source(&self) -> Option<ObjectId> {
        self.cfg.as_ref().map(|c| c.source)
    }

    fn is_root(&self) -> bool {
        self.cfg.as_ref().is_some_and(|c| c.parent.is_none())
    }

    pub fn writes_target(&self, id: &ObjectId) -> bool {
        !self.done && self.is_root() && self.cfg.as_ref().is_some_and(|c| c.target == *id)
    }

    fn parent_host(&self) -> Option<NodeId> {
        self.cfg.as_ref().and_then(|c| c.parent.and_then(|p| p.host))
    }

    /// Discards this slot's own aggregate; retained child blocks stay.
    fn clear_aggregate(&mut self, epoch: u32) {
        self.epoch = epoch;
        self.emitted.clear();
        self.next = 0;
        self.sent_to_parent = 0;
    }

    fn prune_inbox(&mut self) {
        let Some(cfg) = &self.cfg else { return };
        let expected: BTreeMap<SlotId, u32> = cfg.children.iter().map(|c| (c.slot, c.epoch)).collect();
        self.inbox.retain(|(slot, epoch), _| expected.get(slot).is_some_and(|e| epoch >= e));
    }
}

impl Node {
    pub(crate) fn on_reduce_assign(&mut self, a: ReduceAssign) {
        if self.released.contains(&a.target) {
            return;
        }
        let key = (a.target, a.slot);
        let exec = self.executors.entry(key).or_default();
        if exec.cfg.is_some() && (a.epoch < exec.epoch || (exec.done && a.epoch == exec.epoch)) {
            return;
        }
        let bumped = exec.cfg.is_some() && a.epoch > exec.epoch;
        let old_parent = exec.parent_host();
        exec.epoch = a.epoch;
        exec.cfg = Some(a);
        if exec.parent_host() != old_parent {
            exec.sent_to_parent = 0;
        }
        exec.prune_inbox();
        if bumped {
            self.reset_slot(key, self.executors[&key].epoch);
        }
        self.advance_slot(key);
    }

    pub(crate) fn on_reduce_invalidate(&mut self, target: ObjectId, slot: SlotId, epoch: u32) {
        if epoch == RELEASE_EPOCH {
            self.released.insert(target);
            let keys: Vec<_> = self.executors.range((target, 0)..=(target, SlotId::MAX)).map(|(k, _)| *k).collect();
            for k in keys {
                self.executors.remove(&k);
            }
            return;
        }
        let key = (target, slot);
        let Some(exec) = self.executors.get(&key) else { return };
        if epoch <= exec.epoch {
            return;
        }
        self.reset_slot(key, epoch);
        self.advance_slot(key);
    }

    /// Discards the slot's aggregate. A root also discards what it wrote,
    /// even a finished target whose result the coordinator did not take.
    fn reset_slot(&mut self, key: (ObjectId, SlotId), epoch: u32) {
        let exec = self.executors.get_mut(&key).unwrap();
        exec.clear_aggregate(epoch);
        exec.done = false;
        if exec.is_root() && exec.target_started {
            exec.target_started = false;
            let target = key.0;
            if self.store.contains(&target) {
                self.drop_copy(target, AbortReason::Reset);
                self.send_dir(Message::Remove { id: target, node: self.id, kind: RemoveKind::Location });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn on_reduce_chunk(
        &mut self,
        target: ObjectId,
        from_slot: SlotId,
        to_slot: SlotId,
        epoch: u32,
        offset: u64,
        sources: Vec<ObjectId>,
        data: Bytes,
    ) {
        if self.released.contains(&target) {
            return;
        }
        let key = (target, to_slot);
        let exec = self.executors.entry(key).or_default();
        if exec.done {
            return;
        }
        if let Some(cfg) = &exec.cfg {
            let expected = cfg.children.iter().find(|c| c.slot == from_slot).map(|c| c.epoch);
            if expected.is_some_and(|e| epoch < e) {
                return;
            }
        }
        exec.inbox.entry((from_slot, epoch)).or_default().insert(offset, (data, sources));
        self.advance_slot(key);
    }

    /// Produces every aggregate block whose inputs are all present, then
    /// forwards pending blocks to the parent.
    pub(crate) fn advance_slot(&mut self, key: (ObjectId, SlotId)) {
        let block = self.block_size();
        loop {
            let Some(exec) = self.executors.get(&key) else { return };
            let Some(cfg) = &exec.cfg else { return };
            // After an invalidation, wait for the matching assignment.
            if exec.done || cfg.epoch != exec.epoch {
                return;
            }
            let total = cfg.op.total_size();
            let off = exec.next;
            if off >= total {
                break;
            }
            let len = block.min(total - off);
            let Some(local) = self.store.read(&cfg.source, off, len) else { break };
            let mut inputs: Vec<&Block> = Vec::with_capacity(cfg.children.len());
            for c in &cfg.children {
                match exec.inbox.get(&(c.slot, c.epoch)).and_then(|m| m.get(&off)) {
                    Some(b) if c.host.is_some() => inputs.push(b),
                    _ => break,
                }
            }
            if inputs.len() < cfg.children.len() {
                break;
            }
            let mut sources = vec![cfg.source];
            let data = if inputs.is_empty() {
                local
            } else {
                let mut acc = local.to_vec();
                for (bytes, srcs) in &inputs {
                    cfg.op.combine_into(&mut acc, bytes);
                    sources.extend_from_slice(srcs);
                }
                Bytes::from(acc)
            };
            let root = cfg.parent.is_none();
            let exec = self.executors.get_mut(&key).unwrap();
            exec.next = off + len;
            if root {
                self.write_root_block(key, off, data, sources);
            } else {
                exec.emitted.push((off, (data, sources)));
            }
        }
        self.flush_to_parent(key);
    }

    fn flush_to_parent(&mut self, key: (ObjectId, SlotId)) {
        let Some(exec) = self.executors.get_mut(&key) else { return };
        let Some(cfg) = &exec.cfg else { return };
        let (Some(parent), Some(host)) = (cfg.parent, exec.parent_host()) else { return };
        let pending: Vec<Message> = exec.emitted[exec.sent_to_parent..]
            .iter()
            .map(|(off, (data, sources))| Message::ReduceChunk {
                target: key.0,
                from_slot: key.1,
                to_slot: parent.slot,
                epoch: exec.epoch,
                offset: *off,
                sources: sources.clone(),
                data: data.clone(),
            })
            .collect();
        exec.sent_to_parent = exec.emitted.len();
        for msg in pending {
            self.send(host, msg);
        }
    }

    fn write_root_block(&mut self, key: (ObjectId, SlotId), off: u64, data: Bytes, sources: Vec<ObjectId>) {
        let target = key.0;
        let exec = &self.executors[&key];
        let cfg = exec.cfg.as_ref().unwrap();
        let (epoch, total, coordinator) = (exec.epoch, cfg.op.total_size(), cfg.coordinator);
        if !exec.target_started {
            self.start_target(key, total);
        }
        let len = data.len() as u64;
        let wm = {
            let mut w = self.store.writer(&target).expect("root owns the target entry");
            w.write(data).expect("aggregate block fits the target")
        };
        self.trace(TraceEvent::ReduceOutput { target, root_epoch: epoch, offset: off, len, sources: sources.clone() });
        self.on_local_progress(target);
        if wm == total {
            self.executors.get_mut(&key).unwrap().done = true;
            self.send_dir(Message::Publish {
                id: target,
                node: self.id,
                size: total,
                complete: true,
                chain: Vec::new(),
                inline: None,
            });
            self.send(
                coordinator,
                Message::ReduceChunk {
                    target,
                    from_slot: key.1,
                    to_slot: REPORT_SLOT,
                    epoch,
                    offset: total,
                    sources,
                    data: Bytes::new(),
                },
            );
            self.on_local_complete(target);
        }
    }

    /// Creates the target entry. Before a rewrite, stale partial copies
    /// elsewhere are withdrawn.
    fn start_target(&mut self, key: (ObjectId, SlotId), total: u64) {
        let target = key.0;
        let epoch = self.executors[&key].epoch;
        if let Some(f) = self.fetches.remove(&target) {
            if let crate::broadcast::FetchState::Pulling { sender } = f.state {
                self.send_dir(Message::ReturnLocation {
                    id: target,
                    sender,
                    sender_complete: false,
                    sender_gone: false,
                    receiver: self.id,
                    receiver_complete: false,
                });
            }
        }
        if self.store.contains(&target) {
            self.drop_copy(target, AbortReason::Reset);
        }
        if epoch > 0 {
            self.send_dir(Message::Remove { id: target, node: self.id, kind: RemoveKind::Reset });
            self.trace(TraceEvent::TargetReset { target });
        }
        self.store.create_for_write(target, total, true).expect("target entry was cleared");
        self.send_dir(Message::Publish {
            id: target,
            node: self.id,
            size: total,
            complete: false,
            chain: Vec::new(),
            inline: None,
        });
        self.executors.get_mut(&key).unwrap().target_started = true;
    }
}
