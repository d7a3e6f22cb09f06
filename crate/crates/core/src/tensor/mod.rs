//! Dense tensors, random streams, parameters and the autodiff tape.

mod dense;
pub mod gradcheck;
pub mod kernels;
mod param;
mod rng;
mod scalar;
mod tape;

pub use dense::{rel_err, Tensor};
pub use gradcheck::{finite_diff_gradient, CheckResult};
pub use kernels::Padding;
pub use param::{Gradients, ParamGroup, ParamId, ParamStore};
pub use rng::RngStream;
pub use scalar::{DType, Scalar};
pub use tape::{AttentionSpec, Attrs, Primitive, Tape, Var};
