//! Element types and combine kernels for reduce.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceOp {
    Sum,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I32,
    I64,
}

impl DType {
    pub const fn width(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

/// What a reduce computes: the operation, the element type, and how many
/// elements every source holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReduceOpSpec {
    pub op: ReduceOp,
    pub dtype: DType,
    pub element_count: u64,
}

impl ReduceOpSpec {
    pub fn new(op: ReduceOp, dtype: DType, element_count: u64) -> Self {
        Self { op, dtype, element_count }
    }

    pub fn total_size(&self) -> u64 {
        self.element_count * self.dtype.width() as u64
    }

    /// Folds `other` into `acc` elementwise. Both slices must hold whole
    /// elements of this spec's dtype and have equal length.
    pub fn combine_into(&self, acc: &mut [u8], other: &[u8]) {
        assert_eq!(acc.len(), other.len(), "combine over unequal blocks");
        match self.dtype {
            DType::F32 => fold::<f32, 4>(self.op, acc, other),
            DType::F64 => fold::<f64, 8>(self.op, acc, other),
            DType::I32 => fold::<i32, 4>(self.op, acc, other),
            DType::I64 => fold::<i64, 8>(self.op, acc, other),
        }
    }

    /// Checks that a source of `size` bytes fits this spec.
    pub fn check_source_size(&self, size: u64) -> Result<(), String> {
        if size == self.total_size() {
            Ok(())
        } else {
            Err(format!(
                "expected {} bytes ({} x {:?}), found {size}",
                self.total_size(),
                self.element_count,
                self.dtype
            ))
        }
    }

    pub(crate) fn to_code(self) -> (u8, u8) {
        let op = match self.op {
            ReduceOp::Sum => 0,
            ReduceOp::Min => 1,
            ReduceOp::Max => 2,
        };
        let dtype = match self.dtype {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I32 => 2,
            DType::I64 => 3,
        };
        (op, dtype)
    }

    pub(crate) fn from_code(op: u8, dtype: u8, element_count: u64) -> Result<Self> {
        let op = match op {
            0 => ReduceOp::Sum,
            1 => ReduceOp::Min,
            2 => ReduceOp::Max,
            x => return Err(Error::Wire(format!("unknown reduce op {x}"))),
        };
        let dtype = match dtype {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::I32,
            3 => DType::I64,
            x => return Err(Error::Wire(format!("unknown dtype {x}"))),
        };
        Ok(Self { op, dtype, element_count })
    }
}

trait Element: Copy {
    fn from_le(b: &[u8]) -> Self;
    fn write_le(self, out: &mut [u8]);
    fn sum(self, o: Self) -> Self;
    fn min(self, o: Self) -> Self;
    fn max(self, o: Self) -> Self;
}

macro_rules! int_element {
    ($t:ty) => {
        impl Element for $t {
            fn from_le(b: &[u8]) -> Self {
                <$t>::from_le_bytes(b.try_into().unwrap())
            }
            fn write_le(self, out: &mut [u8]) {
                out.copy_from_slice(&self.to_le_bytes());
            }
            // Integer sums wrap so that every association order agrees.
            fn sum(self, o: Self) -> Self {
                self.wrapping_add(o)
            }
            fn min(self, o: Self) -> Self {
                Ord::min(self, o)
            }
            fn max(self, o: Self) -> Self {
                Ord::max(self, o)
            }
        }
    };
}

macro_rules! float_element {
    ($t:ty) => {
        impl Element for $t {
            fn from_le(b: &[u8]) -> Self {
                <$t>::from_le_bytes(b.try_into().unwrap())
            }
            fn write_le(self, out: &mut [u8]) {
                out.copy_from_slice(&self.to_le_bytes());
            }
            fn sum(self, o: Self) -> Self {
                self + o
            }
            fn min(self, o: Self) -> Self {
                <$t>::min(self, o)
            }
            fn max(self, o: Self) -> Self {
                <$t>::max(self, o)
            }
        }
    };
}

int_element!(i32);
int_element!(i64);
float_element!(f32);
float_element!(f64);

fn fold<T: Element, const W: usize>(op: ReduceOp, acc: &mut [u8], other: &[u8]) {
    let f: fn(T, T) -> T = match op {
        ReduceOp::Sum => T::sum,
        ReduceOp::Min => T::min,
        ReduceOp::Max => T::max,
    };
    for (a, b) in acc.chunks_exact_mut(W).zip(other.chunks_exact(W)) {
        f(T::from_le(a), T::from_le(b)).write_le(a);
    }
}

impl fmt::Display for ReduceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Min => "min",
            ReduceOp::Max => "max",
        })
    }
}

impl FromStr for ReduceOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(ReduceOp::Sum),
            "min" => Ok(ReduceOp::Min),
            "max" => Ok(ReduceOp::Max),
            _ => Err(Error::InvalidArgument(format!("unknown reduce op {s:?}"))),
        }
    }
}

impl FromStr for DType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            "i32" => Ok(DType::I32),
            "i64" => Ok(DType::I64),
            _ => Err(Error::InvalidArgument(format!("unknown dtype {s:?}"))),
        }
    }
}

/// Little-endian encoders used by tests, scenarios and examples.
pub mod encode {
    pub fn i32s(v: &[i32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
    pub fn i64s(v: &[i64]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
    pub fn f32s(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
    pub fn f64s(v: &[f64]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
    pub fn to_i32s(b: &[u8]) -> Vec<i32> {
        b.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect()
    }
    pub fn to_i64s(b: &[u8]) -> Vec<i64> {
        b.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()
    }
    pub fn to_f32s(b: &[u8]) -> Vec<f32> {
        b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
    }
    pub fn to_f64s(b: &[u8]) -> Vec<f64> {
        b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    }
}
