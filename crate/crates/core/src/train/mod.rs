//! Optimization, pre-training, fine-tuning and frozen-embedding evaluation.

pub mod contrastive;
pub mod embed;
pub mod finetune;
pub mod optim;
pub mod probe;
pub mod schedule;

pub use contrastive::{train_contrastive, write_trace, TraceRow, TrainConfig, TrainOutcome};
pub use finetune::{finetune, FinetuneConfig, FinetuneOutcome};
pub use optim::AdamW;
pub use schedule::ScheduleConfig;
