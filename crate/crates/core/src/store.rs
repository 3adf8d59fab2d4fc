//! Per-node store of immutable objects.
//!
//! An entry is created at its full size and filled front to back; the
//! watermark counts the valid prefix. Readers may read anything below the
//! watermark while the single writer keeps appending. Payload segments are
//! reference-counted [`Bytes`], so forwarding a block to a peer or handing
//! out a read-only view never copies.

use std::collections::HashMap;

use bytes::{Bytes, BytesMut};

use crate::error::{Error, Result};
use crate::id::ObjectId;

#[derive(Debug)]
struct Entry {
    total_size: u64,
    watermark: u64,
    segments: Vec<Bytes>,
    /// Start offset of each segment.
    starts: Vec<u64>,
    pinned: bool,
    last_used: u64,
}

impl Entry {
    fn complete(&self) -> bool {
        self.watermark == self.total_size
    }

    fn read(&self, offset: u64, len: u64) -> Option<Bytes> {
        let end = offset.checked_add(len)?;
        if end > self.watermark {
            return None;
        }
        if len == 0 {
            return Some(Bytes::new());
        }
        let first = match self.starts.binary_search(&offset) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let seg_off = (offset - self.starts[first]) as usize;
        let seg = &self.segments[first];
        if seg_off + len as usize <= seg.len() {
            return Some(seg.slice(seg_off..seg_off + len as usize));
        }
        let mut out = BytesMut::with_capacity(len as usize);
        let mut pos = offset;
        for (start, seg) in self.starts[first..].iter().zip(&self.segments[first..]) {
            if pos >= end {
                break;
            }
            let from = (pos - start) as usize;
            let to = ((end - start) as usize).min(seg.len());
            out.extend_from_slice(&seg[from..to]);
            pos = start + to as u64;
        }
        Some(out.freeze())
    }
}

/// Snapshot of an entry's bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntryInfo {
    pub total_size: u64,
    pub watermark: u64,
    pub pinned: bool,
    pub complete: bool,
}

#[derive(Debug, Default)]
pub struct ObjectStore {
    entries: HashMap<ObjectId, Entry>,
    /// Logical LRU clock, bumped on every put and get.
    clock: u64,
}

/// Append handle for one partially written entry.
pub struct EntryWriter<'a> {
    entry: &'a mut Entry,
}

impl EntryWriter<'_> {
    /// Appends `data` at the watermark and returns the new watermark.
    pub fn write(&mut self, data: Bytes) -> Result<u64> {
        let e = &mut *self.entry;
        let end = e.watermark + data.len() as u64;
        if end > e.total_size {
            return Err(Error::InvalidArgument(format!(
                "write past end: {end} > {}",
                e.total_size
            )));
        }
        if !data.is_empty() {
            e.starts.push(e.watermark);
            e.segments.push(data);
            e.watermark = end;
        }
        Ok(e.watermark)
    }

    pub fn watermark(&self) -> u64 {
        self.entry.watermark
    }

    pub fn is_complete(&self) -> bool {
        self.entry.complete()
    }
}

impl ObjectStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Creates an empty entry of `total_size` bytes.
    pub fn create_for_write(
        &mut self,
        id: ObjectId,
        total_size: u64,
        pinned: bool,
    ) -> Result<EntryWriter<'_>> {
        if self.entries.contains_key(&id) {
            return Err(Error::DuplicateObject(id));
        }
        if total_size == 0 {
            return Err(Error::ZeroSize);
        }
        let last_used = self.tick();
        let entry = self.entries.entry(id).or_insert(Entry {
            total_size,
            watermark: 0,
            segments: Vec::new(),
            starts: Vec::new(),
            pinned,
            last_used,
        });
        Ok(EntryWriter { entry })
    }

    /// Writer for an existing entry that is not yet complete.
    pub fn writer(&mut self, id: &ObjectId) -> Option<EntryWriter<'_>> {
        self.entries.get_mut(id).filter(|e| !e.complete()).map(|entry| EntryWriter { entry })
    }

    /// Creates a complete entry holding `payload`.
    pub fn put(&mut self, id: ObjectId, payload: Bytes, pinned: bool) -> Result<()> {
        let mut w = self.create_for_write(id, payload.len() as u64, pinned)?;
        w.write(payload)?;
        Ok(())
    }

    pub fn contains(&self, id: &ObjectId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn info(&self, id: &ObjectId) -> Option<EntryInfo> {
        self.entries.get(id).map(|e| EntryInfo {
            total_size: e.total_size,
            watermark: e.watermark,
            pinned: e.pinned,
            complete: e.complete(),
        })
    }

    pub fn watermark(&self, id: &ObjectId) -> Option<u64> {
        self.entries.get(id).map(|e| e.watermark)
    }

    pub fn is_complete(&self, id: &ObjectId) -> bool {
        self.entries.get(id).is_some_and(Entry::complete)
    }

    /// Bytes `[offset, offset + len)` if they are all below the watermark.
    pub fn read(&self, id: &ObjectId, offset: u64, len: u64) -> Option<Bytes> {
        self.entries.get(id)?.read(offset, len)
    }

    /// Contiguous read-only view of a complete entry. Multi-segment entries
    /// are coalesced once and the result is kept.
    ///
    /// A view stays readable after `delete`; callers must not rely on the
    /// object existing in the cluster once they delete it.
    pub fn view(&mut self, id: &ObjectId) -> Option<Bytes> {
        let e = self.entries.get_mut(id).filter(|e| e.complete())?;
        if e.segments.len() > 1 {
            let whole = e.read(0, e.total_size)?;
            e.segments = vec![whole];
            e.starts = vec![0];
        }
        Some(e.segments.first().cloned().unwrap_or_default())
    }

    /// Marks an entry as recently used.
    pub fn touch(&mut self, id: &ObjectId) {
        let now = self.tick();
        if let Some(e) = self.entries.get_mut(id) {
            e.last_used = now;
        }
    }

    pub fn set_pinned(&mut self, id: &ObjectId, pinned: bool) {
        if let Some(e) = self.entries.get_mut(id) {
            e.pinned = pinned;
        }
    }

    /// Drops an entry regardless of pin state.
    pub fn remove(&mut self, id: &ObjectId) -> bool {
        self.entries.remove(id).is_some()
    }

    pub fn used_bytes(&self) -> u64 {
        self.entries.values().map(|e| e.total_size).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ObjectId> {
        self.entries.keys()
    }

    /// Drops least-recently-used unpinned complete entries until at least
    /// `bytes_needed` bytes are freed. Entries for which `busy` returns true
    /// are skipped. Nothing is dropped if the target cannot be reached.
    pub fn evict_unpinned(
        &mut self,
        bytes_needed: u64,
        busy: impl Fn(&ObjectId) -> bool,
    ) -> Result<(u64, Vec<ObjectId>)> {
        let mut candidates: Vec<(u64, ObjectId, u64)> = self
            .entries
            .iter()
            .filter(|(id, e)| !e.pinned && e.complete() && !busy(id))
            .map(|(id, e)| (e.last_used, *id, e.total_size))
            .collect();
        let evictable: u64 = candidates.iter().map(|c| c.2).sum();
        if evictable < bytes_needed {
            return Err(Error::InsufficientSpace { needed: bytes_needed, evictable });
        }
        candidates.sort_unstable();
        let mut freed = 0;
        let mut dropped = Vec::new();
        for (_, id, size) in candidates {
            if freed >= bytes_needed {
                break;
            }
            self.entries.remove(&id);
            freed += size;
            dropped.push(id);
        }
        Ok((freed, dropped))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn id(s: &str) -> ObjectId {
        ObjectId::from_name(s)
    }

    #[test]
    fn streaming_write_advances_watermark() {
        let mut store = ObjectStore::new();
        let block = 4 * 1024 * 1024;
        let data: Vec<u8> = (0..2 * block).map(|i| (i % 251) as u8).collect();
        let mut seen = vec![];
        {
            let mut w = store.create_for_write(id("o"), 2 * block as u64, false).unwrap();
            seen.push(w.watermark());
            seen.push(w.write(Bytes::copy_from_slice(&data[..block])).unwrap());
            assert!(!w.is_complete());
        }
        assert!(store.read(&id("o"), 0, block as u64 + 1).is_none());
        let mut w = store.writer(&id("o")).unwrap();
        seen.push(w.write(Bytes::copy_from_slice(&data[block..])).unwrap());
        assert_eq!(seen, vec![0, block as u64, 2 * block as u64]);
        assert!(store.is_complete(&id("o")));
        assert!(store.writer(&id("o")).is_none());
        assert_eq!(store.view(&id("o")).unwrap(), Bytes::from(data.clone()));
        // Coalesced view keeps serving identical bytes.
        assert_eq!(&store.read(&id("o"), 10, 100).unwrap()[..], &data[10..110]);
    }

    #[test]
    fn duplicate_and_zero_size() {
        let mut store = ObjectStore::new();
        store.put(id("a"), Bytes::from_static(b"x"), true).unwrap();
        assert_eq!(
            store.put(id("a"), Bytes::from_static(b"y"), true),
            Err(Error::DuplicateObject(id("a")))
        );
        assert_eq!(store.put(id("b"), Bytes::new(), true), Err(Error::ZeroSize));
        assert!(store.create_for_write(id("a"), 5, false).is_err());
    }

    #[test]
    fn overrun_is_rejected() {
        let mut store = ObjectStore::new();
        let mut w = store.create_for_write(id("a"), 4, false).unwrap();
        assert!(w.write(Bytes::from_static(b"12345")).is_err());
        assert_eq!(w.watermark(), 0);
    }

    #[test]
    fn abandoned_writer_leaves_partial_entry() {
        let mut store = ObjectStore::new();
        store.create_for_write(id("a"), 8, false).unwrap().write(Bytes::from_static(b"1234")).unwrap();
        let info = store.info(&id("a")).unwrap();
        assert_eq!((info.watermark, info.complete), (4, false));
        assert!(store.view(&id("a")).is_none());
    }

    #[test]
    fn eviction_respects_pins_and_lru() {
        let mut store = ObjectStore::new();
        store.put(id("pinned"), Bytes::from(vec![0; 10]), true).unwrap();
        store.put(id("a"), Bytes::from(vec![1; 10]), false).unwrap();
        store.put(id("b"), Bytes::from(vec![2; 10]), false).unwrap();
        store.touch(&id("a"));
        store.touch(&id("b"));
        let (freed, dropped) = store.evict_unpinned(1, |_| false).unwrap();
        assert_eq!((freed, dropped), (10, vec![id("a")]));

        store.put(id("c"), Bytes::from(vec![3; 10]), false).unwrap();
        let (freed, _) = store.evict_unpinned(20, |_| false).unwrap();
        assert_eq!(freed, 20);
        assert!(store.contains(&id("pinned")));
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn eviction_skips_partial_and_busy_entries() {
        let mut store = ObjectStore::new();
        store.create_for_write(id("partial"), 10, false).unwrap();
        store.put(id("served"), Bytes::from(vec![0; 10]), false).unwrap();
        let err = store.evict_unpinned(1, |i| *i == id("served")).unwrap_err();
        assert_eq!(err, Error::InsufficientSpace { needed: 1, evictable: 0 });
        assert_eq!(store.len(), 2);
    }

    #[test]
    fn eviction_on_empty_store() {
        let mut store = ObjectStore::new();
        assert_eq!(store.evict_unpinned(0, |_| false).unwrap(), (0, vec![]));
        assert!(matches!(store.evict_unpinned(5, |_| false), Err(Error::InsufficientSpace { .. })));
    }

    proptest! {
        #[test]
        fn reads_below_watermark_are_stable(
            chunks in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..40), 1..12),
            probes in prop::collection::vec((0u64..500, 0u64..60), 1..20),
        ) {
            let total: u64 = chunks.iter().map(|c| c.len() as u64).sum();
            let flat: Vec<u8> = chunks.concat();
            let mut store = ObjectStore::new();
            store.create_for_write(id("p"), total, false).unwrap();
            let mut marks = vec![0];
            for c in &chunks {
                let wm = store.writer(&id("p")).unwrap().write(Bytes::from(c.clone())).unwrap();
                prop_assert!(wm >= *marks.last().unwrap());
                marks.push(wm);
                for (off, len) in &probes {
                    match store.read(&id("p"), *off, *len) {
                        Some(b) => prop_assert_eq!(&b[..], &flat[*off as usize..(*off + *len) as usize]),
                        None => prop_assert!(off + len > wm),
                    }
                }
            }
            prop_assert_eq!(*marks.last().unwrap(), total);
            prop_assert!(store.is_complete(&id("p")));
        }
    }
}
