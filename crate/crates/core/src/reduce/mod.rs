//! Streaming tree reduce: degree choice, slot planning and combine kernels.

pub(crate) mod coordinator;
pub(crate) mod executor;
pub mod op;
pub mod plan;

pub use op::{encode, DType, ReduceOp, ReduceOpSpec};
pub use plan::{
    assign_slot, candidate_degrees, choose_degree, invalidation_bound, DegreePolicy, DegreeRegistry, LatencyModel,
    ReducePlan, SlotId, TreeShape,
};
