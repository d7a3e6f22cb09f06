pub mod arch;
pub mod node;
pub mod optim;
pub mod run;
mod sampling;
mod space;
pub mod supernet;

pub use arch::{argmax_lowest, discretize, ArchDims, Architecture, DecoderChoices, Provenance, ARCH_VERSION};
pub use node::{pool_inputs, Pooling, SearchNode, SplitOp, ALPHA_INIT_STD};
pub use optim::{Adam, BilevelOptimizer, InverseSqrt};
pub use run::{
    bilevel_step, checkpoint_dir, export_architecture, load_theta, rank_sampled_paths, run_search, save_theta,
    AlphaFile, MetricsLine, SearchConfig, SearchOutcome, StepResult, Strategy,
};
pub use sampling::{path_kinds, sample_uniform_path};
pub use space::{search_space_size, search_space_size_uniform};
pub use supernet::{Dims, LossReport, Mode, ModelOptions, Seq2Seq, StepLogs};
