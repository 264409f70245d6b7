//! Concept-decoupled classification with cross-modal concept distillation.
//!
//! A student classifier predicts classes from image-concept cosine
//! similarities through a linear concept classifier. A frozen teacher trained
//! on a second modality transfers knowledge through two losses on the
//! concept-similarity axis: class-prototype alignment (GPD) and a supervised
//! contrastive term whose positives span both modalities (LCD).
//!
//! Module map:
//! - [`numerics`]: dense matrices and a small reverse-mode tape.
//! - [`concept_pool`]: concept pool I/O and the six selection strategies.
//! - [`model`]: encoder, similarity, concept classifier, score fusion.
//! - [`distillation`]: prototypes, GPD, LCD and the composite objective.
//! - [`training`]: AdamW, cosine schedule, unpaired sampling, train loops.
//! - [`synthdata`]: two-modality synthetic data with teacher-dominant concepts.
//! - [`metrics`]: per-class and macro evaluation metrics.
//! - [`checkpoint`]: model checkpoint files bound to a pool fingerprint.

pub mod checkpoint;
pub mod concept_pool;
pub mod distillation;
mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthdata;
pub mod training;

pub use concept_pool::{Concept, ConceptPool, SelectionMethod};
pub use distillation::{ClassPrototypes, DistillConfig, GpdReduction};
pub use error::{Error, Result};
pub use metrics::{ConfusionCounts, MetricsReport};
pub use model::{Modality, ModelParams, Prediction};
pub use numerics::{Matrix, Tape, Var};
pub use synthdata::{GeneratorConfig, SampleRecord, Split, SyntheticDataset};
pub use training::{OptimizerState, TrainConfig};

/// Deterministic RNG for one named stream of a run seed.
pub(crate) fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
