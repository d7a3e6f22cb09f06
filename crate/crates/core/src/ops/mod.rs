//! Candidate operations for search nodes.

mod instance;
mod kind;

pub use instance::{build_op_set, OpContext, OpInstance, ATTENTION_HEADS, DYN_CONV_GROUPS, LN_EPS};
pub use kind::{OpKind, Side};
