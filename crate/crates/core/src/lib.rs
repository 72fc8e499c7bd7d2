//! SwitchHead laboratory: mixture-of-experts attention, its dense, head-gated
//! and MoA baselines, a closed-form compute/memory cost model checked against
//! an instrumented counter, parameter matching, and desk-scale training.

pub mod attention;
pub mod costmodel;
pub mod error;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod tasks;

pub use error::{Error, Result};
