//! Autoregressive modelling of residual code stacks.
//!
//! [`RqTransformer`] factors a `T × D` code stack with a causal spatial
//! stack over positions and a causal depth stack over the codes of each
//! position. [`NaiveTransformer`] models the same codes as one unfolded
//! sequence of length `T·D` and serves as the cost baseline.

mod block;
pub mod checkpoint;
pub mod config;
mod error;
pub mod flops;
pub mod model;
pub mod naive;
pub mod sample;
pub mod train;

pub use block::Dropout;
pub use config::{ConditionMode, ModelConfig, NaiveConfig};
pub use error::{Error, Result};
pub use flops::{flop_report, FlopReport};
pub use model::{code_table, one_hot_targets, ComponentMacs, Forward, RqTransformer};
pub use naive::NaiveTransformer;
pub use sample::{sample, teacher_forced, Decoder, NaiveDecoder, RqDecoder, SampleConfig};
pub use train::{evaluate, train, ArDataset, ArExample, ScheduleKind, TraceEntry, TrainConfig};
