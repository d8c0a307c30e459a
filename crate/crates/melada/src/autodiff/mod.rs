//! Reverse-mode automatic differentiation and the Adam optimizer.

mod adam;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState, GroupAdam};
pub use tape::{GraphNode, NodeId, Op, Tape};
