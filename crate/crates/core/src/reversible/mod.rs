//! Multi-split reversible layers and backpropagation with reconstruction.

mod layer;
pub mod oracle;
mod stack;

pub use layer::{LayerContext, LayerGrad, LinearSplit, ReversibleLayer, RngLog, SplitFunction};
pub use stack::{ForwardOptions, ReversibleStack, StackState, DRIFT_THRESHOLD};
