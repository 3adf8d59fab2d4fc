//! Framed wire protocol shared by the TCP and simulated transports.
//!
//! Every frame is `magic(4) | msg_type(1) | body_len(8, LE) | body`. Bodies
//! are little-endian fixed-width fields; variable-length lists carry a `u32`
//! count and byte strings a `u64` length.

use std::io::{Read, Write};

use bytes::{Buf, BufMut, Bytes, BytesMut};

use crate::error::{Error, Result};
use crate::id::{NodeId, ObjectId, OBJECT_ID_LEN};
use crate::reduce::op::ReduceOpSpec;

pub const MAGIC: [u8; 4] = [0x48, 0x4F, 0x50, 0x4C];
pub const HEADER_LEN: usize = 13;
/// Largest body a peer may announce.
pub const MAX_BODY_LEN: u64 = 1 << 36;

pub mod msg_type {
    pub const HELLO: u8 = 0x00;
    pub const PULL: u8 = 0x01;
    pub const CHUNK: u8 = 0x02;
    pub const COMPLETE: u8 = 0x03;
    pub const ABORT: u8 = 0x04;
    pub const DIR_PUBLISH: u8 = 0x10;
    pub const DIR_CHECKOUT: u8 = 0x11;
    pub const DIR_CHECKOUT_REPLY: u8 = 0x12;
    pub const DIR_RETURN: u8 = 0x13;
    pub const DIR_SUBSCRIBE: u8 = 0x14;
    pub const DIR_EVENT: u8 = 0x15;
    pub const DIR_REMOVE: u8 = 0x16;
    pub const REDUCE_ASSIGN: u8 = 0x20;
    pub const REDUCE_CHUNK: u8 = 0x21;
    pub const REDUCE_INVALIDATE: u8 = 0x22;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub body: Bytes,
}

impl Frame {
    pub fn encode(&self) -> Bytes {
        let mut out = BytesMut::with_capacity(HEADER_LEN + self.body.len());
        out.put_slice(&MAGIC);
        out.put_u8(self.msg_type);
        out.put_u64_le(self.body.len() as u64);
        out.put_slice(&self.body);
        out.freeze()
    }

    /// Parses one frame from the front of `buf`. Returns `Ok(None)` when more
    /// bytes are needed, and the number of bytes consumed otherwise.
    pub fn decode(buf: &[u8]) -> Result<Option<(Frame, usize)>> {
        if buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let (msg_type, body_len) = parse_header(buf[..HEADER_LEN].try_into().unwrap())?;
        let total = HEADER_LEN + body_len as usize;
        if buf.len() < total {
            return Ok(None);
        }
        let body = Bytes::copy_from_slice(&buf[HEADER_LEN..total]);
        Ok(Some((Frame { msg_type, body }, total)))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Frame> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)?;
        let (msg_type, body_len) = parse_header(&header)?;
        let mut body = vec![0u8; body_len as usize];
        r.read_exact(&mut body)?;
        Ok(Frame { msg_type, body: Bytes::from(body) })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut header = [0u8; HEADER_LEN];
        header[..4].copy_from_slice(&MAGIC);
        header[4] = self.msg_type;
        header[5..].copy_from_slice(&(self.body.len() as u64).to_le_bytes());
        w.write_all(&header)?;
        w.write_all(&self.body)?;
        Ok(())
    }
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(u8, u64)> {
    if h[..4] != MAGIC {
        return Err(Error::Wire(format!("bad magic {:02x?}", &h[..4])));
    }
    let msg_type = h[4];
    if !is_known_type(msg_type) {
        return Err(Error::Wire(format!("unknown message type {msg_type:#04x}")));
    }
    let body_len = u64::from_le_bytes(h[5..].try_into().unwrap());
    if body_len > MAX_BODY_LEN {
        return Err(Error::Wire(format!("body length {body_len} exceeds limit")));
    }
    Ok((msg_type, body_len))
}

fn is_known_type(t: u8) -> bool {
    matches!(t, 0x00..=0x04 | 0x10..=0x16 | 0x20..=0x22)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbortReason {
    /// The sender already serves this object to another receiver.
    Busy,
    /// The sender no longer holds the object.
    Gone,
    Deleted,
    /// The object's partial content was withdrawn and will be rewritten.
    Reset,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CheckoutResult {
    Inline(Bytes),
    Granted { sender: NodeId, size: u64, chain: Vec<NodeId> },
    NotYetAvailable,
    Deleted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DirEvent {
    Published { node: NodeId, size: u64, complete: bool },
    Removed { node: NodeId },
    Deleted,
    /// Partial copies were withdrawn; content will be republished.
    Reset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RemoveKind {
    /// Drop one node's location (eviction).
    Location,
    /// Delete the object cluster-wide.
    Delete,
    /// Withdraw every partial location.
    Reset,
}

/// One end of a reduce tree edge as the coordinator currently sees it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotLink {
    pub slot: u32,
    pub host: Option<NodeId>,
    pub epoch: u32,
}

/// Full configuration of one reduce slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReduceAssign {
    pub target: ObjectId,
    pub coordinator: NodeId,
    pub slot: u32,
    pub epoch: u32,
    pub source: ObjectId,
    pub op: ReduceOpSpec,
    pub n: u32,
    pub d: u32,
    pub parent: Option<SlotLink>,
    pub children: Vec<SlotLink>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    /// First frame on a TCP session, naming the connecting node.
    Hello { node: NodeId },
    Pull { id: ObjectId, start_offset: u64 },
    Chunk { id: ObjectId, offset: u64, total_size: u64, data: Bytes },
    Complete { id: ObjectId, sender_complete: bool },
    Abort { id: ObjectId, reason: AbortReason },
    Publish {
        id: ObjectId,
        node: NodeId,
        size: u64,
        complete: bool,
        chain: Vec<NodeId>,
        inline: Option<Bytes>,
    },
    Checkout { id: ObjectId, requester: NodeId, exclude: Vec<NodeId> },
    CheckoutReply { id: ObjectId, result: CheckoutResult },
    ReturnLocation {
        id: ObjectId,
        sender: NodeId,
        sender_complete: bool,
        sender_gone: bool,
        receiver: NodeId,
        receiver_complete: bool,
    },
    Subscribe { id: ObjectId, subscriber: NodeId, active: bool },
    Event { id: ObjectId, event: DirEvent },
    Remove { id: ObjectId, node: NodeId, kind: RemoveKind },
    ReduceAssign(ReduceAssign),
    ReduceChunk {
        target: ObjectId,
        from_slot: u32,
        to_slot: u32,
        epoch: u32,
        offset: u64,
        sources: Vec<ObjectId>,
        data: Bytes,
    },
    /// `epoch == RELEASE_EPOCH` tells the host the reduce is over.
    ReduceInvalidate { target: ObjectId, slot: u32, epoch: u32 },
}

pub const RELEASE_EPOCH: u32 = u32::MAX;

/// `to_slot` of the root's final REDUCE_CHUNK to the coordinator. The
/// message carries no data; `sources` lists the included sources.
pub const REPORT_SLOT: u32 = u32::MAX;

impl Message {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            Message::Hello { .. } => HELLO,
            Message::Pull { .. } => PULL,
            Message::Chunk { .. } => CHUNK,
            Message::Complete { .. } => COMPLETE,
            Message::Abort { .. } => ABORT,
            Message::Publish { .. } => DIR_PUBLISH,
            Message::Checkout { .. } => DIR_CHECKOUT,
            Message::CheckoutReply { .. } => DIR_CHECKOUT_REPLY,
            Message::ReturnLocation { .. } => DIR_RETURN,
            Message::Subscribe { .. } => DIR_SUBSCRIBE,
            Message::Event { .. } => DIR_EVENT,
            Message::Remove { .. } => DIR_REMOVE,
            Message::ReduceAssign(_) => REDUCE_ASSIGN,
            Message::ReduceChunk { .. } => REDUCE_CHUNK,
            Message::ReduceInvalidate { .. } => REDUCE_INVALIDATE,
        }
    }

    /// Object the message is about, if any.
    pub fn object(&self) -> Option<ObjectId> {
        match self {
            Message::Hello { .. } => None,
            Message::Pull { id, .. }
            | Message::Chunk { id, .. }
            | Message::Complete { id, .. }
            | Message::Abort { id, .. }
            | Message::Publish { id, .. }
            | Message::Checkout { id, .. }
            | Message::CheckoutReply { id, .. }
            | Message::ReturnLocation { id, .. }
            | Message::Subscribe { id, .. }
            | Message::Event { id, .. }
            | Message::Remove { id, .. } => Some(*id),
            Message::ReduceAssign(a) => Some(a.target),
            Message::ReduceChunk { target, .. } | Message::ReduceInvalidate { target, .. } => {
                Some(*target)
            }
        }
    }

    /// Payload bytes carried by data-plane messages.
    pub fn payload_len(&self) -> u64 {
        match self {
            Message::Chunk { data, .. } | Message::ReduceChunk { data, .. } => data.len() as u64,
            _ => 0,
        }
    }

    /// True for messages that move object content between stores.
    /// Store-to-store transfers and reduce blocks. Each peer pair keeps
    /// these in one ordered stream, apart from directory and reduce control.
    pub fn is_data_plane(&self) -> bool {
        self.is_store_transfer() || matches!(self, Message::ReduceChunk { .. })
    }

    /// True for the store-to-store transfer protocol (pull, chunks, completion).
    pub fn is_store_transfer(&self) -> bool {
        matches!(
            self,
            Message::Pull { .. }
                | Message::Chunk { .. }
                | Message::Complete { .. }
                | Message::Abort { .. }
        )
    }

    /// Size of the encoded frame, computed without encoding.
    pub fn frame_len(&self) -> u64 {
        let mut c = Counter(0);
        self.write_body(&mut c);
        HEADER_LEN as u64 + c.0
    }

    pub fn to_frame(&self) -> Frame {
        let mut body = BytesMut::with_capacity(self.frame_len() as usize - HEADER_LEN);
        self.write_body(&mut body);
        Frame { msg_type: self.msg_type(), body: body.freeze() }
    }

    pub fn encode(&self) -> Bytes {
        self.to_frame().encode()
    }

    pub fn from_frame(frame: &Frame) -> Result<Message> {
        let mut r = Reader(frame.body.clone());
        let msg = Self::read_body(frame.msg_type, &mut r)?;
        if r.0.has_remaining() {
            return Err(Error::Wire(format!(
                "{} trailing bytes after message type {:#04x}",
                r.0.remaining(),
                frame.msg_type
            )));
        }
        Ok(msg)
    }

    fn write_body(&self, w: &mut impl Sink) {
        match self {
            Message::Hello { node } => w.u32(node.0),
            Message::Pull { id, start_offset } => {
                w.id(id);
                w.u64(*start_offset);
            }
            Message::Chunk { id, offset, total_size, data } => {
                w.id(id);
                w.u64(*offset);
                w.u64(*total_size);
                w.blob(data);
            }
            Message::Complete { id, sender_complete } => {
                w.id(id);
                w.bool(*sender_complete);
            }
            Message::Abort { id, reason } => {
                w.id(id);
                w.u8(match reason {
                    AbortReason::Busy => 1,
                    AbortReason::Gone => 2,
                    AbortReason::Deleted => 3,
                    AbortReason::Reset => 4,
                });
            }
            Message::Publish { id, node, size, complete, chain, inline } => {
                w.id(id);
                w.u32(node.0);
                w.u64(*size);
                w.bool(*complete);
                w.nodes(chain);
                match inline {
                    Some(b) => {
                        w.bool(true);
                        w.blob(b);
                    }
                    None => w.bool(false),
                }
            }
            Message::Checkout { id, requester, exclude } => {
                w.id(id);
                w.u32(requester.0);
                w.nodes(exclude);
            }
            Message::CheckoutReply { id, result } => {
                w.id(id);
                match result {
                    CheckoutResult::Inline(b) => {
                        w.u8(0);
                        w.blob(b);
                    }
                    CheckoutResult::Granted { sender, size, chain } => {
                        w.u8(1);
                        w.u32(sender.0);
                        w.u64(*size);
                        w.nodes(chain);
                    }
                    CheckoutResult::NotYetAvailable => w.u8(2),
                    CheckoutResult::Deleted => w.u8(3),
                }
            }
            Message::ReturnLocation {
                id,
                sender,
                sender_complete,
                sender_gone,
                receiver,
                receiver_complete,
            } => {
                w.id(id);
                w.u32(sender.0);
                w.bool(*sender_complete);
                w.bool(*sender_gone);
                w.u32(receiver.0);
                w.bool(*receiver_complete);
            }
            Message::Subscribe { id, subscriber, active } => {
                w.id(id);
                w.u32(subscriber.0);
                w.bool(*active);
            }
            Message::Event { id, event } => {
                w.id(id);
                match event {
                    DirEvent::Published { node, size, complete } => {
                        w.u8(0);
                        w.u32(node.0);
                        w.u64(*size);
                        w.bool(*complete);
                    }
                    DirEvent::Removed { node } => {
                        w.u8(1);
                        w.u32(node.0);
                    }
                    DirEvent::Deleted => w.u8(2),
                    DirEvent::Reset => w.u8(3),
                }
            }
            Message::Remove { id, node, kind } => {
                w.id(id);
                w.u32(node.0);
                w.u8(match kind {
                    RemoveKind::Location => 0,
                    RemoveKind::Delete => 1,
                    RemoveKind::Reset => 2,
                });
            }
            Message::ReduceAssign(a) => {
                w.id(&a.target);
                w.u32(a.coordinator.0);
                w.u32(a.slot);
                w.u32(a.epoch);
                w.id(&a.source);
                let (op, dtype) = a.op.to_code();
                w.u8(op);
                w.u8(dtype);
                w.u64(a.op.element_count);
                w.u32(a.n);
                w.u32(a.d);
                match &a.parent {
                    Some(p) => {
                        w.bool(true);
                        w.link(p);
                    }
                    None => w.bool(false),
                }
                w.u32(a.children.len() as u32);
                for c in &a.children {
                    w.link(c);
                }
            }
            Message::ReduceChunk { target, from_slot, to_slot, epoch, offset, sources, data } => {
                w.id(target);
                w.u32(*from_slot);
                w.u32(*to_slot);
                w.u32(*epoch);
                w.u64(*offset);
                w.u32(sources.len() as u32);
                for s in sources {
                    w.id(s);
                }
                w.blob(data);
            }
            Message::ReduceInvalidate { target, slot, epoch } => {
                w.id(target);
                w.u32(*slot);
                w.u32(*epoch);
            }
        }
    }

    fn read_body(t: u8, r: &mut Reader) -> Result<Message> {
        use msg_type::*;
        Ok(match t {
            HELLO => Message::Hello { node: r.node()? },
            PULL => Message::Pull { id: r.id()?, start_offset: r.u64()? },
            CHUNK => Message::Chunk {
                id: r.id()?,
                offset: r.u64()?,
                total_size: r.u64()?,
                data: r.blob()?,
            },
            COMPLETE => Message::Complete { id: r.id()?, sender_complete: r.bool()? },
            ABORT => Message::Abort {
                id: r.id()?,
                reason: match r.u8()? {
                    1 => AbortReason::Busy,
                    2 => AbortReason::Gone,
                    3 => AbortReason::Deleted,
                    4 => AbortReason::Reset,
                    x => return Err(Error::Wire(format!("unknown abort reason {x}"))),
                },
            },
            DIR_PUBLISH => Message::Publish {
                id: r.id()?,
                node: r.node()?,
                size: r.u64()?,
                complete: r.bool()?,
                chain: r.nodes()?,
                inline: if r.bool()? { Some(r.blob()?) } else { None },
            },
            DIR_CHECKOUT => {
                Message::Checkout { id: r.id()?, requester: r.node()?, exclude: r.nodes()? }
            }
            DIR_CHECKOUT_REPLY => {
                let id = r.id()?;
                let result = match r.u8()? {
                    0 => CheckoutResult::Inline(r.blob()?),
                    1 => CheckoutResult::Granted {
                        sender: r.node()?,
                        size: r.u64()?,
                        chain: r.nodes()?,
                    },
                    2 => CheckoutResult::NotYetAvailable,
                    3 => CheckoutResult::Deleted,
                    x => return Err(Error::Wire(format!("unknown checkout result {x}"))),
                };
                Message::CheckoutReply { id, result }
            }
            DIR_RETURN => Message::ReturnLocation {
                id: r.id()?,
                sender: r.node()?,
                sender_complete: r.bool()?,
                sender_gone: r.bool()?,
                receiver: r.node()?,
                receiver_complete: r.bool()?,
            },
            DIR_SUBSCRIBE => {
                Message::Subscribe { id: r.id()?, subscriber: r.node()?, active: r.bool()? }
            }
            DIR_EVENT => {
                let id = r.id()?;
                let event = match r.u8()? {
                    0 => DirEvent::Published { node: r.node()?, size: r.u64()?, complete: r.bool()? },
                    1 => DirEvent::Removed { node: r.node()? },
                    2 => DirEvent::Deleted,
                    3 => DirEvent::Reset,
                    x => return Err(Error::Wire(format!("unknown directory event {x}"))),
                };
                Message::Event { id, event }
            }
            DIR_REMOVE => Message::Remove {
                id: r.id()?,
                node: r.node()?,
                kind: match r.u8()? {
                    0 => RemoveKind::Location,
                    1 => RemoveKind::Delete,
                    2 => RemoveKind::Reset,
                    x => return Err(Error::Wire(format!("unknown remove kind {x}"))),
                },
            },
            REDUCE_ASSIGN => {
                let target = r.id()?;
                let coordinator = r.node()?;
                let slot = r.u32()?;
                let epoch = r.u32()?;
                let source = r.id()?;
                let (op, dtype, count) = (r.u8()?, r.u8()?, r.u64()?);
                let op = ReduceOpSpec::from_code(op, dtype, count)?;
                let n = r.u32()?;
                let d = r.u32()?;
                let parent = if r.bool()? { Some(r.link()?) } else { None };
                let count = r.count(13)?;
                let children = (0..count).map(|_| r.link()).collect::<Result<_>>()?;
                Message::ReduceAssign(ReduceAssign {
                    target,
                    coordinator,
                    slot,
                    epoch,
                    source,
                    op,
                    n,
                    d,
                    parent,
                    children,
                })
            }
            REDUCE_CHUNK => {
                let target = r.id()?;
                let from_slot = r.u32()?;
                let to_slot = r.u32()?;
                let epoch = r.u32()?;
                let offset = r.u64()?;
                let count = r.count(OBJECT_ID_LEN)?;
                let sources = (0..count).map(|_| r.id()).collect::<Result<_>>()?;
                Message::ReduceChunk {
                    target,
                    from_slot,
                    to_slot,
                    epoch,
                    offset,
                    sources,
                    data: r.blob()?,
                }
            }
            REDUCE_INVALIDATE => {
                Message::ReduceInvalidate { target: r.id()?, slot: r.u32()?, epoch: r.u32()? }
            }
            x => return Err(Error::Wire(format!("unknown message type {x:#04x}"))),
        })
    }
}

trait Sink {
    fn put(&mut self, bytes: &[u8]);
    fn u8(&mut self, v: u8) {
        self.put(&[v]);
    }
    fn bool(&mut self, v: bool) {
        self.u8(u8::from(v));
    }
    fn u32(&mut self, v: u32) {
        self.put(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.put(&v.to_le_bytes());
    }
    fn id(&mut self, id: &ObjectId) {
        self.put(id.as_bytes());
    }
    fn blob(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.put(b);
    }
    fn nodes(&mut self, nodes: &[NodeId]) {
        self.u32(nodes.len() as u32);
        for n in nodes {
            self.u32(n.0);
        }
    }
    fn link(&mut self, l: &SlotLink) {
        self.u32(l.slot);
        self.u32(l.host.map_or(u32::MAX, |h| h.0));
        self.u32(l.epoch);
        self.bool(l.host.is_some());
    }
}

impl Sink for BytesMut {
    fn put(&mut self, bytes: &[u8]) {
        self.put_slice(bytes);
    }
}

struct Counter(u64);

impl Sink for Counter {
    fn put(&mut self, bytes: &[u8]) {
        self.0 += bytes.len() as u64;
    }
}

struct Reader(Bytes);

impl Reader {
    fn need(&self, n: usize) -> Result<()> {
        if self.0.remaining() < n {
            Err(Error::Wire(format!("truncated body: need {n}, have {}", self.0.remaining())))
        } else {
            Ok(())
        }
    }
    fn u8(&mut self) -> Result<u8> {
        self.need(1)?;
        Ok(self.0.get_u8())
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            x => Err(Error::Wire(format!("invalid bool {x}"))),
        }
    }
    fn u32(&mut self) -> Result<u32> {
        self.need(4)?;
        Ok(self.0.get_u32_le())
    }
    fn u64(&mut self) -> Result<u64> {
        self.need(8)?;
        Ok(self.0.get_u64_le())
    }
    fn node(&mut self) -> Result<NodeId> {
        self.u32().map(NodeId)
    }
    fn id(&mut self) -> Result<ObjectId> {
        self.need(OBJECT_ID_LEN)?;
        let mut b = [0u8; OBJECT_ID_LEN];
        self.0.copy_to_slice(&mut b);
        Ok(ObjectId(b))
    }
    fn blob(&mut self) -> Result<Bytes> {
        let len = self.u64()?;
        if len > self.0.remaining() as u64 {
            return Err(Error::Wire(format!("blob of {len} bytes overruns body")));
        }
        Ok(self.0.split_to(len as usize))
    }
    /// Reads a list length and checks it against the bytes left.
    fn count(&mut self, elem: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem) > self.0.remaining() {
            return Err(Error::Wire(format!("list of {n} entries overruns body")));
        }
        Ok(n)
    }
    fn nodes(&mut self) -> Result<Vec<NodeId>> {
        let n = self.count(4)?;
        (0..n).map(|_| self.node()).collect()
    }
    fn link(&mut self) -> Result<SlotLink> {
        let slot = self.u32()?;
        let host = self.u32()?;
        let epoch = self.u32()?;
        let has_host = self.bool()?;
        Ok(SlotLink { slot, host: has_host.then_some(NodeId(host)), epoch })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reduce::op::{DType, ReduceOp};
    use proptest::prelude::*;

    #[test]
    fn frame_layout_is_bit_exact() {
        let msg = Message::Pull { id: ObjectId::from_name("x"), start_offset: 0x0102 };
        let bytes = msg.encode();
        assert_eq!(&bytes[..4], b"HOPL");
        assert_eq!(bytes[4], 0x01);
        assert_eq!(u64::from_le_bytes(bytes[5..13].try_into().unwrap()), 28);
        assert_eq!(&bytes[13..33], ObjectId::from_name("x").as_bytes());
        assert_eq!(&bytes[33..], &[0x02, 0x01, 0, 0, 0, 0, 0, 0]);
        assert_eq!(msg.frame_len(), bytes.len() as u64);
    }

    #[test]
    fn rejects_bad_frames() {
        let mut bytes = Message::Hello { node: NodeId(3) }.encode().to_vec();
        bytes[4] = 0x09;
        assert!(matches!(Frame::decode(&bytes), Err(Error::Wire(_))));
        bytes[4] = 0x00;
        bytes[0] = b'X';
        assert!(matches!(Frame::decode(&bytes), Err(Error::Wire(_))));

        // Declared length longer than the body that follows: incomplete.
        let mut short = Message::Hello { node: NodeId(3) }.encode().to_vec();
        short.pop();
        assert_eq!(Frame::decode(&short).unwrap(), None);

        // Body that does not parse as its type.
        let frame = Frame { msg_type: msg_type::PULL, body: Bytes::from_static(&[1, 2, 3]) };
        assert!(Message::from_frame(&frame).is_err());
        let frame = Frame { msg_type: msg_type::HELLO, body: Bytes::from_static(&[1, 0, 0, 0, 9]) };
        assert!(Message::from_frame(&frame).is_err(), "trailing bytes");
    }

    #[test]
    fn stream_read_write() {
        let msgs = vec![
            Message::Hello { node: NodeId(1) },
            Message::Chunk {
                id: ObjectId::from_name("a"),
                offset: 8,
                total_size: 16,
                data: Bytes::from_static(b"12345678"),
            },
        ];
        let mut buf = Vec::new();
        for m in &msgs {
            m.to_frame().write_to(&mut buf).unwrap();
        }
        let mut cursor = std::io::Cursor::new(buf);
        for m in &msgs {
            let f = Frame::read_from(&mut cursor).unwrap();
            assert_eq!(&Message::from_frame(&f).unwrap(), m);
        }
    }

    fn arb_id() -> impl Strategy<Value = ObjectId> {
        any::<[u8; 20]>().prop_map(ObjectId)
    }
    fn arb_nodes() -> impl Strategy<Value = Vec<NodeId>> {
        prop::collection::vec(any::<u32>().prop_map(NodeId), 0..5)
    }
    fn arb_bytes() -> impl Strategy<Value = Bytes> {
        prop::collection::vec(any::<u8>(), 0..64).prop_map(Bytes::from)
    }
    fn arb_link() -> impl Strategy<Value = SlotLink> {
        (any::<u32>(), prop::option::of(any::<u32>().prop_map(NodeId)), any::<u32>())
            .prop_map(|(slot, host, epoch)| SlotLink { slot, host, epoch })
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        let spec = (0u8..3, 0u8..4, any::<u64>())
            .prop_map(|(o, d, c)| ReduceOpSpec::from_code(o, d, c).unwrap());
        prop_oneof![
            any::<u32>().prop_map(|n| Message::Hello { node: NodeId(n) }),
            (arb_id(), any::<u64>()).prop_map(|(id, o)| Message::Pull { id, start_offset: o }),
            (arb_id(), any::<u64>(), any::<u64>(), arb_bytes()).prop_map(|(id, offset, total_size, data)| {
                Message::Chunk { id, offset, total_size, data }
            }),
            (arb_id(), any::<bool>()).prop_map(|(id, c)| Message::Complete { id, sender_complete: c }),
            (arb_id(), 0usize..4).prop_map(|(id, r)| Message::Abort {
                id,
                reason: [AbortReason::Busy, AbortReason::Gone, AbortReason::Deleted, AbortReason::Reset][r]
            }),
            (arb_id(), any::<u32>(), any::<u64>(), any::<bool>(), arb_nodes(), prop::option::of(arb_bytes()))
                .prop_map(|(id, n, size, complete, chain, inline)| Message::Publish {
                    id, node: NodeId(n), size, complete, chain, inline
                }),
            (arb_id(), any::<u32>(), arb_nodes())
                .prop_map(|(id, r, exclude)| Message::Checkout { id, requester: NodeId(r), exclude }),
            (arb_id(), arb_bytes(), any::<u32>(), any::<u64>(), arb_nodes(), 0usize..4).prop_map(
                |(id, b, s, size, chain, k)| Message::CheckoutReply {
                    id,
                    result: match k {
                        0 => CheckoutResult::Inline(b),
                        1 => CheckoutResult::Granted { sender: NodeId(s), size, chain },
                        2 => CheckoutResult::NotYetAvailable,
                        _ => CheckoutResult::Deleted,
                    }
                }
            ),
            (arb_id(), any::<u32>(), any::<[bool; 3]>(), any::<u32>()).prop_map(|(id, s, f, r)| {
                Message::ReturnLocation {
                    id,
                    sender: NodeId(s),
                    sender_complete: f[0],
                    sender_gone: f[1],
                    receiver: NodeId(r),
                    receiver_complete: f[2],
                }
            }),
            (arb_id(), any::<u32>(), any::<bool>())
                .prop_map(|(id, s, a)| Message::Subscribe { id, subscriber: NodeId(s), active: a }),
            (arb_id(), any::<u32>(), any::<u64>(), any::<bool>(), 0usize..4).prop_map(
                |(id, n, size, complete, k)| Message::Event {
                    id,
                    event: match k {
                        0 => DirEvent::Published { node: NodeId(n), size, complete },
                        1 => DirEvent::Removed { node: NodeId(n) },
                        2 => DirEvent::Deleted,
                        _ => DirEvent::Reset,
                    }
                }
            ),
            (arb_id(), any::<u32>(), 0usize..3).prop_map(|(id, n, k)| Message::Remove {
                id,
                node: NodeId(n),
                kind: [RemoveKind::Location, RemoveKind::Delete, RemoveKind::Reset][k]
            }),
            (arb_id(), any::<u32>(), any::<[u32; 4]>(), arb_id(), spec, prop::option::of(arb_link()),
             prop::collection::vec(arb_link(), 0..4))
                .prop_map(|(target, c, v, source, op, parent, children)| {
                    Message::ReduceAssign(ReduceAssign {
                        target, coordinator: NodeId(c), slot: v[0], epoch: v[1], source, op,
                        n: v[2], d: v[3], parent, children,
                    })
                }),
            (arb_id(), any::<[u32; 3]>(), any::<u64>(), prop::collection::vec(arb_id(), 0..4), arb_bytes())
                .prop_map(|(target, v, offset, sources, data)| Message::ReduceChunk {
                    target, from_slot: v[0], to_slot: v[1], epoch: v[2], offset, sources, data
                }),
            (arb_id(), any::<u32>(), any::<u32>())
                .prop_map(|(target, slot, epoch)| Message::ReduceInvalidate { target, slot, epoch }),
        ]
    }

    proptest! {
        #[test]
        fn every_message_roundtrips(msg in arb_message()) {
            let bytes = msg.encode();
            prop_assert_eq!(bytes.len() as u64, msg.frame_len());
            let (frame, used) = Frame::decode(&bytes).unwrap().unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(Message::from_frame(&frame).unwrap(), msg);
        }

        #[test]
        fn truncation_never_yields_a_frame(msg in arb_message(), cut in 0usize..200) {
            let bytes = msg.encode();
            let cut = cut.min(bytes.len().saturating_sub(1));
            prop_assert_eq!(Frame::decode(&bytes[..cut]).unwrap(), None);
        }
    }

    #[test]
    fn spec_codes_cover_all_ops() {
        for op in [ReduceOp::Sum, ReduceOp::Min, ReduceOp::Max] {
            for dt in [DType::F32, DType::F64, DType::I32, DType::I64] {
                let s = ReduceOpSpec::new(op, dt, 3);
                let (o, d) = s.to_code();
                assert_eq!(ReduceOpSpec::from_code(o, d, 3).unwrap(), s);
            }
        }
    }
}
