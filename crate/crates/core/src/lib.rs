//! Boosted ensembles of MAC-budgeted CNNs and a simulator for running them on
//! an energy-harvesting device under a tabular Q-learning scheduler.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boost;
pub mod config;
pub mod data;
pub mod energy;
pub mod ensemble;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod prune;
pub mod scheduler;
pub mod sim;
pub mod store;

pub use data::{BlobConfig, Dataset, Sample, Split};
pub use error::{Error, Result};
pub use nn::{NetworkSpec, TrainConfig, WeakLearner};
