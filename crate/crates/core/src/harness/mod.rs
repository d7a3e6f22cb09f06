pub mod data;
mod embedding;
mod train;

pub use data::{generate_dataset, Batch, DataSpec, Example, ShardKind, ShardSizes, SyntheticDataset, Task};
pub use embedding::FactorizedEmbedding;
pub use train::{
    evaluate, greedy_decode, max_output_len, select_checkpoint, teacher_forced_accuracy, teacher_forced_loss,
    train_derived, CheckpointScore, EvalReport, Selection, TrainConfig, TrainMetric, TrainOutcome,
};
