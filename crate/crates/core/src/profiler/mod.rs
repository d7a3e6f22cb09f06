pub mod ledger;
mod memprofile;

pub use ledger::{EvalPhase, MemoryLedger, Retained};
pub use memprofile::{
    measure_point, profile_batch, profile_memory, Backbone, MemProfileConfig, ProfileRow, ProfileSummary, RatioPoint,
    CSV_HEADER,
};
