//! LaneRoPE: lane-aware rotary positional encoding with causal cross-lane
//! attention, for generating several inter-dependent sequences in parallel.

pub mod attention;
pub mod bench;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod rope;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
