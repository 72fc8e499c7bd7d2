//! Desk-scale data and the loops that train and evaluate models on it.

pub mod corpus;
pub mod listops;
mod train;

pub use corpus::CharCorpus;
pub use listops::{gen_listops, ListOpsExample, ListOpsParams};
pub use train::{evaluate, train, train_with, write_metrics, Evaluation, MetricRow, Split, Tally, Task, TrainConfig};
