//! Loss, optimizer, schedule, metrics, datasets and the training loop.

pub mod ablation;
mod data;
mod metrics;
mod optim;
mod trainer;

pub use data::{Augment, Dataset, InMemoryDataset, NormStats, SyntheticSpec};
pub use metrics::{argmax, macro_prf1, ClassMetrics, MetricsReport};
pub use optim::{cosine_warmup_lr, AdamState, AdamW, StepOutcome};
pub use trainer::{evaluate, predict, train, train_from, train_with, EpochLog, TrainConfig, TrainError, TrainOutcome};
