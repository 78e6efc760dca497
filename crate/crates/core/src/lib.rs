//! Federated-learning simulator for studying free-rider attacks.
//!
//! Fair clients train an MLP on private shards; free riders fabricate
//! updates from the global trajectory. The server can score uploads with a
//! peer parameter audit or a cosine reputation, aggregate with FedAvg or a
//! robust rule, and clients can privatize uploads with Gaussian noise and
//! random pruning. A gradient-matching attack measures what those
//! transforms leak.

pub mod aggregation;
pub mod autodiff;
pub mod clients;
pub mod data;
pub mod defense;
pub mod error;
pub mod model;
pub mod optim;
pub mod privacy;
pub mod sim;

pub use error::{Error, Result};
pub use model::{Batch, ModelConfig, ParamVector};
