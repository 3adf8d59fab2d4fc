//! Offline checks over a recorded trace.
//!
//! * single sender (exclusive sender policies only): a sender serves at
//!   most one receiver per object at a time, and every applied chunk
//!   arrives over a granted pairing;
//! * acyclic: granted pairings never form a cycle;
//! * exactly once: each node applies each byte of a copy once, and the
//!   final reduce output folds every included source into every block once;
//! * bounded repair: one failure invalidates at most `ceil(log_d n) + 1`
//!   slots (`n` for a chain).

use std::collections::{BTreeMap, BTreeSet};

use crate::id::{NodeId, ObjectId};
use crate::reduce::invalidation_bound;
use crate::trace::{TraceEvent, TraceRecord};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub t: u64,
    pub node: NodeId,
    pub invariant: &'static str,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplayReport {
    pub grants: u64,
    pub chunks: u64,
    pub reduces: u64,
    pub invalidations: u64,
    pub violations: Vec<Violation>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Checker {
    exclusive: bool,
    report: ReplayReport,
    /// Active grants per object: receiver -> sender.
    granted: BTreeMap<ObjectId, BTreeMap<NodeId, NodeId>>,
    /// Next expected offset of each node's copy.
    applied: BTreeMap<(NodeId, ObjectId), u64>,
    outputs: BTreeMap<ObjectId, BTreeMap<u32, Vec<(NodeId, u64, u64, Vec<ObjectId>)>>>,
}

impl Checker {
    fn flag(&mut self, r: &TraceRecord, invariant: &'static str, detail: String) {
        self.report.violations.push(Violation { t: r.t, node: r.node, invariant, detail });
    }

    fn step(&mut self, r: &TraceRecord) {
        match &r.event {
            TraceEvent::Grant { id, sender, receiver, .. } => {
                self.report.grants += 1;
                let g = self.granted.entry(*id).or_default();
                if let Some((other, _)) = g.iter().find(|(_, s)| *s == sender) {
                    let other = *other;
                    self.flag(r, "single-sender", format!("{sender} granted to {receiver} while serving {other} ({id})"));
                }
                let g = self.granted.entry(*id).or_default();
                if g.contains_key(receiver) {
                    self.flag(r, "single-sender", format!("{receiver} granted a second sender for {id}"));
                }
                let g = self.granted.entry(*id).or_default();
                let mut hop = Some(*sender);
                let mut steps = 0;
                while let Some(h) = hop {
                    if h == *receiver || steps > g.len() {
                        self.flag(r, "acyclic", format!("granting {sender} -> {receiver} closes a cycle for {id}"));
                        break;
                    }
                    hop = g.get(&h).copied();
                    steps += 1;
                }
                self.granted.entry(*id).or_default().insert(*receiver, *sender);
            }
            TraceEvent::Release { id, sender, receiver } => {
                let g = self.granted.entry(*id).or_default();
                if g.get(receiver) == Some(sender) {
                    g.remove(receiver);
                } else {
                    self.flag(r, "single-sender", format!("release of {sender} -> {receiver} without a grant ({id})"));
                }
            }
            TraceEvent::ChunkApplied { id, sender, offset, len } => {
                self.report.chunks += 1;
                let granted = self.granted.get(id).and_then(|g| g.get(&r.node)) == Some(sender);
                if self.exclusive && !granted {
                    self.flag(r, "single-sender", format!("chunk of {id} from {sender} without a grant"));
                }
                let next = self.applied.entry((r.node, *id)).or_insert(0);
                if *offset != *next {
                    let expected = *next;
                    self.flag(r, "exactly-once", format!("{id} chunk at {offset}, expected {expected}"));
                } else {
                    *next += len;
                }
            }
            TraceEvent::CopyDropped { id, .. } => {
                self.applied.remove(&(r.node, *id));
            }
            TraceEvent::Killed | TraceEvent::Revived => {
                let node = r.node;
                self.applied.retain(|(n, _), _| *n != node);
            }
            TraceEvent::ReduceOutput { target, root_epoch, offset, len, sources } => {
                self.outputs.entry(*target).or_default().entry(*root_epoch).or_default().push((
                    r.node,
                    *offset,
                    *len,
                    sources.clone(),
                ));
            }
            TraceEvent::ReduceDone { target, included, .. } => {
                self.report.reduces += 1;
                self.check_output(r, *target, included);
            }
            TraceEvent::Invalidate { target, failed_slot, slots, d, n } => {
                self.report.invalidations += 1;
                let bound = invalidation_bound(*d, *n) as usize;
                if slots.len() > bound {
                    self.flag(
                        r,
                        "bounded-repair",
                        format!("{target} slot {failed_slot} invalidated {} slots, bound {bound}", slots.len()),
                    );
                }
            }
            _ => {}
        }
    }

    fn check_output(&mut self, r: &TraceRecord, target: ObjectId, included: &[ObjectId]) {
        let Some((epoch, blocks)) = self.outputs.get(&target).and_then(|m| m.iter().next_back()) else {
            return self.flag(r, "exactly-once", format!("{target} finished without output"));
        };
        let (epoch, mut blocks) = (*epoch, blocks.clone());
        blocks.sort_by_key(|b| b.1);
        let want: BTreeSet<ObjectId> = included.iter().copied().collect();
        if want.len() != included.len() {
            self.flag(r, "exactly-once", format!("{target} reports a source twice"));
        }
        let writers: BTreeSet<NodeId> = blocks.iter().map(|b| b.0).collect();
        if writers.len() > 1 {
            self.flag(r, "exactly-once", format!("{target} epoch {epoch} written by {writers:?}"));
        }
        let mut next = 0;
        for (_, offset, len, sources) in &blocks {
            if *offset != next {
                self.flag(r, "exactly-once", format!("{target} output at {offset}, expected {next}"));
            }
            next = offset + len;
            let mut got = sources.clone();
            got.sort();
            if got != want.iter().copied().collect::<Vec<_>>() {
                self.flag(r, "exactly-once", format!("{target} block {offset} folds {got:?}"));
            }
        }
    }
}

pub fn check(records: &[TraceRecord], exclusive_senders: bool) -> ReplayReport {
    let mut c = Checker {
        exclusive: exclusive_senders,
        report: ReplayReport::default(),
        granted: BTreeMap::new(),
        applied: BTreeMap::new(),
        outputs: BTreeMap::new(),
    };
    for r in records {
        c.step(r);
    }
    c.report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: u64, node: u32, event: TraceEvent) -> TraceRecord {
        TraceRecord { t, node: NodeId(node), event }
    }

    fn grant(s: u32, r: u32) -> TraceEvent {
        TraceEvent::Grant { id: ObjectId::from_name("a"), sender: NodeId(s), receiver: NodeId(r), sender_complete: false }
    }

    fn chunk(s: u32, offset: u64) -> TraceEvent {
        TraceEvent::ChunkApplied { id: ObjectId::from_name("a"), sender: NodeId(s), offset, len: 10 }
    }

    #[test]
    fn clean_relay_passes() {
        let t = vec![rec(0, 0, grant(0, 1)), rec(1, 1, chunk(0, 0)), rec(2, 1, chunk(0, 10)), rec(2, 0, grant(1, 2)), rec(3, 2, chunk(1, 0))];
        let r = check(&t, true);
        assert!(r.is_clean(), "{:?}", r.violations);
        assert_eq!((r.grants, r.chunks), (2, 3));
    }

    #[test]
    fn double_grant_and_cycle_are_flagged() {
        let r = check(&[rec(0, 0, grant(0, 1)), rec(1, 0, grant(0, 2))], true);
        assert_eq!(r.violations[0].invariant, "single-sender");
        let r = check(&[rec(0, 0, grant(1, 2)), rec(1, 0, grant(2, 1))], true);
        assert!(r.violations.iter().any(|v| v.invariant == "acyclic"));
    }

    #[test]
    fn duplicate_bytes_are_flagged_unless_the_copy_was_dropped() {
        let t = vec![rec(0, 0, grant(0, 1)), rec(1, 1, chunk(0, 0)), rec(2, 1, chunk(0, 0))];
        assert_eq!(check(&t, true).violations[0].invariant, "exactly-once");
        let dropped = TraceEvent::CopyDropped { id: ObjectId::from_name("a"), watermark: 10 };
        let t = vec![rec(0, 0, grant(0, 1)), rec(1, 1, chunk(0, 0)), rec(2, 1, dropped), rec(3, 1, chunk(0, 0))];
        assert!(check(&t, true).is_clean());
    }

    #[test]
    fn reduce_output_must_fold_exactly_the_included_sources() {
        let (a, b, x) = (ObjectId::from_name("a"), ObjectId::from_name("b"), ObjectId::from_name("x"));
        let out = |epoch, offset, sources: Vec<ObjectId>| TraceEvent::ReduceOutput {
            target: x,
            root_epoch: epoch,
            offset,
            len: 4,
            sources,
        };
        let done = TraceEvent::ReduceDone { target: x, included: vec![a, b], d: 2, n: 2 };
        let good = vec![rec(0, 0, out(0, 0, vec![a])), rec(1, 1, out(1, 0, vec![b, a])), rec(2, 1, out(1, 4, vec![a, b])), rec(3, 0, done.clone())];
        assert!(check(&good, true).is_clean());
        let bad = vec![rec(0, 1, out(1, 0, vec![a, a])), rec(1, 1, out(1, 4, vec![a, b])), rec(3, 0, done)];
        assert!(!check(&bad, true).is_clean());
    }

    #[test]
    fn oversized_invalidation_is_flagged() {
        let inv = |k: usize| TraceEvent::Invalidate {
            target: ObjectId::from_name("x"),
            failed_slot: 0,
            slots: (0..k as u32).collect(),
            d: 2,
            n: 16,
        };
        assert!(check(&[rec(0, 0, inv(5))], true).is_clean());
        assert!(!check(&[rec(0, 0, inv(6))], true).is_clean());
    }
}
