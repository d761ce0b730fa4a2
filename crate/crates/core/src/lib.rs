//! Dynamic multi-task loss weighting.
//!
//! A shared-trunk network is trained on `Σ wᵢ·Lᵢ` while a separate softmax
//! generator produces the task weights `w` from the trunk's features and is
//! trained on `Σ wᵢ/Lᵢ`, which pushes weight toward the task with the
//! largest current loss. The crate contains the numeric core (tensors, a
//! reverse-mode tape, gradient checking), the losses, the weight generator,
//! the network, a trainer with baseline strategies, verification and
//! identification metrics, and a synthetic multi-task data generator.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, Objective, TapeObjective};
pub use graph::{Graph, Var};
pub use losses::{CenterBank, LossConfig};
pub use metrics::{EmbeddingSet, Modality, Pair};
pub use net::{Activation, MultiTaskNet, NetConfig, TaskBatch};
pub use params::ParamStore;
pub use tensor::{matmul, softmax_stable, Tensor};
pub use weights::{generate_weights, WeightGenerator, WeightGradMode};
