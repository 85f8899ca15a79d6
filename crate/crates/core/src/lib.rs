//! Adaptive sampled softmax with inverted multi-index samplers.
//!
//! The sampler factorizes the softmax over a two-level quantization of the
//! class embeddings, so a query costs `O(K·D)` to prepare and `O(1)` per draw
//! (fast kind) instead of `O(N·D)`.

pub mod alias;
pub mod codebook_learning;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod numeric;
pub mod quantization;
pub mod rng;
pub mod sampled_softmax;
pub mod samplers;
pub mod toy_trainer;

pub use alias::AliasTable;
pub use codebook_learning::{LearnConfig, LearnReport, SoftCodebooks};
pub use diagnostics::{DivergenceReport, GradBiasConfig, GradBiasReport};
pub use error::{Error, Result};
pub use numeric::{
    dot, log_sum_exp, softmax, EmbeddingMatrix, Logits, Matrix, ProbabilityVector, QueryVector,
};
pub use quantization::{Codebook, IndexConfig, MultiIndex, QuantizerKind};
pub use sampled_softmax::{CorrectedBatch, GradEstimator};
pub use samplers::{PreparedQuery, SampleBatch, SamplerKind, SamplerSpec};
pub use toy_trainer::{GradientSource, TaskConfig, ToyTask, TrainConfig, TrainReport};
