//! Deep-supervision loss with OHEM, poly schedule and the SGD loop.

pub mod config;
pub mod loss;
pub mod trainer;

pub use config::{OhemConfig, RunConfig, TrainConfig};
pub use loss::{ohem_reduce, poly_lr, total_loss, Reduced};
pub use trainer::{csv_header, train_loop, LossRecord, ProgressSink, RunDir, Trainer};
