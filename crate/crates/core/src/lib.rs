//! Covariate temporal point process toolkit.
//!
//! Event sequences are triplets (time, type, covariate vector). The model
//! couples a causal self-attention encoder over event embeddings with a
//! per-covariate feature-importance attention module and a log-normal
//! mixture decoder for the next inter-event time plus a categorical head for
//! the next event type. Synthetic data comes from thinning-based simulators
//! for covariate-modulated Poisson and Hawkes processes with known
//! ground-truth feature relevance.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod gradcheck;
pub mod graph;
pub mod importance;
pub mod metrics;
pub mod model;
pub mod params;
pub mod serialize;
pub mod sim;
pub mod stats;
pub mod tensor;
pub mod train;

pub use data::{Dataset, EventSequence, Split};
pub use decoder::MixtureParams;
pub use encoder::HyperParams;
pub use graph::{Graph, NodeId, NumericsError};
pub use importance::ImportanceReport;
pub use metrics::Metrics;
pub use model::CovariateTpp;
pub use params::ParamStore;
pub use sim::SimConfig;
pub use tensor::Tensor;
pub use train::TrainConfig;
