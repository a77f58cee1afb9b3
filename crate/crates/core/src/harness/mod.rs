//! Configuration, training, evaluation, checkpoints and ablations.

pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradsuite;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use train::{evaluate, load_splits, train, EpochLog, Prepared, TrainOutcome, Trainer};
