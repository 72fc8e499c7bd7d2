//! Attention layers: dense multi-head attention with optional relative (XL)
//! or rotary positions, head gating, SwitchHead and mixture-of-attention-heads.
//!
//! A head is one computed attention matrix. SwitchHead keeps few heads and
//! makes their value/key/query/output projections mixtures of experts chosen
//! separately on the source side (keys, values) and the destination side
//! (queries, outputs).

mod config;
mod layer;
pub mod position;

pub use config::{AttentionConfig, ExpertFlags, Position, Readout, Scale, Variant};
pub use layer::{AttentionLayer, AttentionTrace, ForwardOpts, LayerCache, Proj, SelectionRecord};
pub use position::Window;
