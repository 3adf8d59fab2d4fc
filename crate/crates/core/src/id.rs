use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Length in bytes of an [`ObjectId`].
pub const OBJECT_ID_LEN: usize = 20;

/// Opaque, fixed-length name of an immutable object.
///
/// Uniqueness is the caller's responsibility; the store only compares and
/// hashes the bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectId(pub [u8; OBJECT_ID_LEN]);

impl ObjectId {
    pub const fn from_bytes(bytes: [u8; OBJECT_ID_LEN]) -> Self {
        Self(bytes)
    }

    /// Derives an id from an arbitrary string by zero-padding or truncating
    /// its UTF-8 bytes. Convenient for tests and scenarios.
    pub fn from_name(name: &str) -> Self {
        let mut bytes = [0u8; OBJECT_ID_LEN];
        let src = name.as_bytes();
        let n = src.len().min(OBJECT_ID_LEN);
        bytes[..n].copy_from_slice(&src[..n]);
        Self(bytes)
    }

    /// Builds an id from a namespace tag and an index.
    pub fn from_parts(tag: u64, index: u64) -> Self {
        let mut bytes = [0u8; OBJECT_ID_LEN];
        bytes[..8].copy_from_slice(&tag.to_be_bytes());
        bytes[8..16].copy_from_slice(&index.to_be_bytes());
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; OBJECT_ID_LEN] {
        &self.0
    }

    /// FNV-1a over the id bytes. Stable across runs and platforms, which the
    /// shard mapping relies on.
    pub fn stable_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.0 {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

impl fmt::Debug for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ObjectId({self})")
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Printable names (from_name) render as text, everything else as hex.
        let trimmed: Vec<u8> = self.0.iter().copied().take_while(|b| *b != 0).collect();
        let rest_zero = self.0[trimmed.len()..].iter().all(|b| *b == 0);
        if !trimmed.is_empty() && rest_zero && trimmed.iter().all(|b| b.is_ascii_graphic()) {
            f.write_str(std::str::from_utf8(&trimmed).unwrap_or("?"))
        } else {
            for b in self.0 {
                write!(f, "{b:02x}")?;
            }
            Ok(())
        }
    }
}

impl ObjectId {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 2 * OBJECT_ID_LEN || !s.is_ascii() {
            return None;
        }
        let mut bytes = [0u8; OBJECT_ID_LEN];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
        }
        Some(Self(bytes))
    }
}

// Hex in human-readable formats (traces, configs).
impl Serialize for ObjectId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ObjectId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ObjectId::from_hex(&s).ok_or_else(|| serde::de::Error::custom(format!("bad object id {s:?}")))
    }
}

/// Identifier of a store node in the cluster.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}
