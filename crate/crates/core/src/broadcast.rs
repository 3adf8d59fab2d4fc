//! Receiver-driven broadcast: fetching objects from senders granted by the
//! directory, and serving pulls from the local store.
//!
//! A receiver checks out one sender, pulls from its own watermark, and
//! publishes itself as a partial location so later receivers can pull from
//! it while it is still filling. On sender failure it checks out again and
//! resumes at the watermark.

use std::collections::VecDeque;

use crate::error::Error;
use crate::id::{NodeId, ObjectId};
use crate::node::{ClientReply, Node, TimerKind};
use crate::trace::TraceEvent;
use crate::wire::{AbortReason, CheckoutResult, Message, RemoveKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum FetchState {
    /// Waiting for a checkout reply (possibly parked at the directory).
    Checking,
    Pulling { sender: NodeId },
    /// The content was reset while pulling. Chunks still in flight from
    /// `sender` are stale; wait for its stream to end before checking out.
    Draining { sender: NodeId },
    /// Turned away by a busy sender; a retry timer is armed.
    Backoff,
}

#[derive(Clone, Debug)]
pub(crate) struct Fetch {
    pub state: FetchState,
    pub exclude: Vec<NodeId>,
    pub checkout_outstanding: bool,
}

/// Outbound pulls of one object. Only the dynamic policy's directory
/// guarantees one receiver at a time; other policies queue here.
#[derive(Clone, Debug, Default)]
pub(crate) struct Serve {
    pub active: Option<(NodeId, u64)>,
    pub queue: VecDeque<(NodeId, u64)>,
}

impl Node {
    pub(crate) fn start_fetch(&mut self, id: ObjectId) {
        self.fetches.insert(
            id,
            Fetch { state: FetchState::Checking, exclude: Vec::new(), checkout_outstanding: false },
        );
        self.checkout(id);
    }

    /// Asks the directory for a sender unless a request is already parked.
    fn checkout(&mut self, id: ObjectId) {
        let Some(f) = self.fetches.get_mut(&id) else { return };
        f.state = FetchState::Checking;
        if f.checkout_outstanding {
            return;
        }
        f.checkout_outstanding = true;
        let exclude = f.exclude.clone();
        self.send_dir(Message::Checkout { id, requester: self.id, exclude });
    }

    fn return_sender(&mut self, id: ObjectId, sender: NodeId, gone: bool, done: bool) {
        self.send_dir(Message::ReturnLocation {
            id,
            sender,
            sender_complete: false,
            sender_gone: gone,
            receiver: self.id,
            receiver_complete: done,
        });
    }

    pub(crate) fn on_checkout_reply(&mut self, id: ObjectId, result: CheckoutResult) {
        let Some(f) = self.fetches.get_mut(&id) else {
            // A parked checkout answered after the fetch ended.
            if let CheckoutResult::Granted { sender, .. } = result {
                let done = self.store.is_complete(&id);
                self.return_sender(id, sender, false, done);
                if !self.store.contains(&id) {
                    self.send_dir(Message::Remove { id, node: self.id, kind: RemoveKind::Location });
                }
            }
            return;
        };
        match result {
            CheckoutResult::NotYetAvailable => {}
            CheckoutResult::Inline(payload) => {
                f.checkout_outstanding = false;
                self.fetches.remove(&id);
                if !self.store.contains(&id) {
                    self.store.put(id, payload, false).expect("entry absent");
                }
                self.trace(TraceEvent::FetchDone { id });
                self.on_local_complete(id);
            }
            CheckoutResult::Deleted => {
                f.checkout_outstanding = false;
                self.on_deleted(id);
            }
            CheckoutResult::Granted { sender, size, .. } => {
                f.checkout_outstanding = false;
                match self.store.info(&id) {
                    Some(info) if info.complete => {
                        self.fetches.remove(&id);
                        self.return_sender(id, sender, false, true);
                        self.on_local_complete(id);
                        return;
                    }
                    Some(info) if info.total_size != size => {
                        self.fetches.remove(&id);
                        self.return_sender(id, sender, false, false);
                        let err = Error::SizeMismatch { id, recorded: info.total_size, claimed: size };
                        for (ticket, _) in self.waiters.remove(&id).unwrap_or_default() {
                            self.reply(ticket, ClientReply::Failed(err.clone()));
                        }
                        return;
                    }
                    Some(_) => {}
                    None => {
                        self.store.create_for_write(id, size, false).expect("entry absent");
                    }
                }
                let start = self.store.watermark(&id).unwrap_or(0);
                self.fetches.get_mut(&id).unwrap().state = FetchState::Pulling { sender };
                self.trace(TraceEvent::PullStart { id, sender, offset: start });
                self.send(sender, Message::Pull { id, start_offset: start });
            }
        }
    }

    pub(crate) fn on_chunk(
        &mut self,
        from: NodeId,
        id: ObjectId,
        offset: u64,
        total_size: u64,
        data: bytes::Bytes,
    ) {
        let pulling = matches!(
            self.fetches.get(&id),
            Some(Fetch { state: FetchState::Pulling { sender }, .. }) if *sender == from
        );
        if !pulling {
            return;
        }
        let Some(info) = self.store.info(&id) else { return };
        if info.watermark != offset || info.total_size != total_size {
            return;
        }
        let len = data.len() as u64;
        if let Some(mut w) = self.store.writer(&id) {
            if w.write(data).is_err() {
                return;
            }
        }
        self.trace(TraceEvent::ChunkApplied { id, sender: from, offset, len });
        self.on_local_progress(id);
    }

    pub(crate) fn on_transfer_complete(&mut self, from: NodeId, id: ObjectId, sender_complete: bool) {
        let Some(f) = self.fetches.get(&id) else { return };
        match f.state {
            FetchState::Pulling { sender } if sender == from => {
                if self.store.is_complete(&id) {
                    self.fetches.remove(&id);
                    self.send_dir(Message::ReturnLocation {
                        id,
                        sender,
                        sender_complete,
                        sender_gone: false,
                        receiver: self.id,
                        receiver_complete: true,
                    });
                    self.trace(TraceEvent::FetchDone { id });
                    self.on_local_complete(id);
                } else {
                    self.return_sender(id, sender, false, false);
                    self.checkout(id);
                }
            }
            FetchState::Draining { sender } if sender == from => self.checkout(id),
            _ => {}
        }
    }

    pub(crate) fn on_abort(&mut self, from: NodeId, id: ObjectId, reason: AbortReason) {
        let Some(f) = self.fetches.get(&id) else { return };
        match f.state {
            FetchState::Pulling { sender } if sender == from => match reason {
                AbortReason::Busy => {
                    self.return_sender(id, sender, false, false);
                    self.fetches.get_mut(&id).unwrap().state = FetchState::Backoff;
                    let after = self.cfg.busy_retry();
                    self.set_timer(after, TimerKind::Retry(id));
                }
                AbortReason::Gone => {
                    self.return_sender(id, sender, true, false);
                    self.checkout(id);
                }
                AbortReason::Deleted => self.on_deleted(id),
                AbortReason::Reset => {
                    self.drop_copy(id, AbortReason::Reset);
                    self.checkout(id);
                }
            },
            FetchState::Draining { sender } if sender == from => {
                if reason == AbortReason::Deleted {
                    self.on_deleted(id);
                } else {
                    self.checkout(id);
                }
            }
            _ => {}
        }
    }

    pub(crate) fn on_retry(&mut self, id: ObjectId) {
        if matches!(self.fetches.get(&id), Some(f) if f.state == FetchState::Backoff) {
            self.checkout(id);
        }
    }

    /// The directory withdrew partial copies of `id`; its content will be
    /// rewritten.
    pub(crate) fn on_reset(&mut self, id: ObjectId) {
        if self.writes_locally(&id) {
            return;
        }
        self.drop_copy(id, AbortReason::Reset);
        let Some(f) = self.fetches.get_mut(&id) else { return };
        match f.state {
            FetchState::Pulling { sender } => f.state = FetchState::Draining { sender },
            FetchState::Draining { .. } | FetchState::Checking => {}
            FetchState::Backoff => self.checkout(id),
        }
    }

    pub(crate) fn fetches_peer_down(&mut self, peer: NodeId) {
        let hit: Vec<(ObjectId, FetchState)> = self
            .fetches
            .iter()
            .filter(|(_, f)| {
                matches!(f.state, FetchState::Pulling { sender } | FetchState::Draining { sender } if sender == peer)
            })
            .map(|(id, f)| (*id, f.state))
            .collect();
        for (id, state) in hit {
            if let FetchState::Pulling { sender } = state {
                self.return_sender(id, sender, true, false);
            }
            self.fetches.get_mut(&id).unwrap().exclude = vec![peer];
            self.checkout(id);
        }
    }

    pub(crate) fn on_pull(&mut self, from: NodeId, id: ObjectId, start: u64) {
        if !self.store.contains(&id) {
            let reason = if self.deleted.contains(&id) { AbortReason::Deleted } else { AbortReason::Gone };
            self.send(from, Message::Abort { id, reason });
            return;
        }
        let exclusive = self.exclusive_senders;
        let serve = self.serves.entry(id).or_default();
        match serve.active {
            Some((r, _)) if r != from => {
                if exclusive {
                    self.send(from, Message::Abort { id, reason: AbortReason::Busy });
                    return;
                }
                serve.queue.retain(|(q, _)| *q != from);
                serve.queue.push_back((from, start));
            }
            _ => serve.active = Some((from, start)),
        }
        self.pump(id);
    }

    /// Streams every block that is below the local watermark to the active
    /// receiver, finishing with COMPLETE.
    pub(crate) fn pump(&mut self, id: ObjectId) {
        let block = self.block_size();
        loop {
            let Some(serve) = self.serves.get_mut(&id) else { return };
            let Some((receiver, next)) = serve.active else {
                self.serves.remove(&id);
                return;
            };
            let Some(info) = self.store.info(&id) else { return };
            if next >= info.total_size {
                serve.active = serve.queue.pop_front();
                self.send(receiver, Message::Complete { id, sender_complete: info.complete });
                continue;
            }
            let len = block.min(info.total_size - next);
            if next + len > info.watermark {
                return;
            }
            serve.active = Some((receiver, next + len));
            let data = self.store.read(&id, next, len).expect("bytes are below the watermark");
            self.send(
                receiver,
                Message::Chunk { id, offset: next, total_size: info.total_size, data },
            );
        }
    }

    pub(crate) fn abort_serves(&mut self, id: ObjectId, reason: AbortReason) {
        let Some(serve) = self.serves.remove(&id) else { return };
        for (r, _) in serve.active.into_iter().chain(serve.queue) {
            self.send(r, Message::Abort { id, reason });
        }
    }

    pub(crate) fn serves_peer_down(&mut self, peer: NodeId) {
        let ids: Vec<ObjectId> = self.serves.keys().copied().collect();
        for id in ids {
            let serve = self.serves.get_mut(&id).unwrap();
            serve.queue.retain(|(r, _)| *r != peer);
            if matches!(serve.active, Some((r, _)) if r == peer) {
                serve.active = serve.queue.pop_front();
                self.pump(id);
            }
        }
    }
}
