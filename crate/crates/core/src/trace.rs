//! Protocol trace events recorded by the simulator and checked offline.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::id::{NodeId, ObjectId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum TraceEvent {
    /// Directory granted `sender` to `receiver`.
    Grant { id: ObjectId, sender: NodeId, receiver: NodeId, sender_complete: bool },
    /// `sender` stopped serving `receiver` (returned, or either side purged).
    Release { id: ObjectId, sender: NodeId, receiver: NodeId },
    PullStart { id: ObjectId, sender: NodeId, offset: u64 },
    /// A transfer block landed in the receiver's store.
    ChunkApplied { id: ObjectId, sender: NodeId, offset: u64, len: u64 },
    /// The node's fetch of `id` finished with a complete local copy.
    FetchDone { id: ObjectId },
    /// The node's partial copy of `id` was discarded.
    CopyDropped { id: ObjectId, watermark: u64 },
    SlotAssigned { target: ObjectId, slot: u32, epoch: u32, source: ObjectId, host: NodeId },
    /// One slot failure and the slots it invalidated (itself first).
    Invalidate { target: ObjectId, failed_slot: u32, slots: Vec<u32>, d: u32, n: u32 },
    /// The root wrote one block of the result.
    ReduceOutput { target: ObjectId, root_epoch: u32, offset: u64, len: u64, sources: Vec<ObjectId> },
    ReduceDone { target: ObjectId, included: Vec<ObjectId>, d: u32, n: u32 },
    TargetReset { target: ObjectId },
    Killed,
    Revived,
    Partitioned { peer: NodeId },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Simulated time in nanoseconds.
    pub t: u64,
    pub node: NodeId,
    #[serde(flatten)]
    pub event: TraceEvent,
}

pub fn write_jsonl(records: &[TraceRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("trace line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip() {
        let recs = vec![
            TraceRecord {
                t: 5,
                node: NodeId(1),
                event: TraceEvent::ChunkApplied {
                    id: ObjectId::from_name("a"),
                    sender: NodeId(0),
                    offset: 0,
                    len: 4,
                },
            },
            TraceRecord { t: 6, node: NodeId(2), event: TraceEvent::Killed },
        ];
        let mut buf = Vec::new();
        write_jsonl(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"t":5,"node":1,"ev":"chunk_applied""#), "{text}");
        assert_eq!(read_jsonl(&buf[..]).unwrap(), recs);
        assert!(read_jsonl(&b"{not json}\n"[..]).is_err());
    }
}
