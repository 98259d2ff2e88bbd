//! steerlab: inference-time activation steering for small decoder-only
//! transformers.
//!
//! The crate covers the full loop: load a model with hookable residual
//! streams ([`model`]), estimate difference-in-means direction vectors from
//! matched prompt sets ([`directions`]), pick the intervention layer and
//! strength on a validation split ([`selection`]), and score steered
//! generations with a deterministic rule judge or a remote binary judge
//! ([`judge`]). [`corpus`] handles prompt ingestion, dedup, and splitting;
//! [`planted`] builds a linear fixture whose steering direction, effective
//! layer, and flip thresholds are known in closed form.

pub mod container;
pub mod corpus;
pub mod directions;
pub mod judge;
pub mod model;
pub mod parallel;
pub mod planted;
pub mod rng;
pub mod selection;
pub mod tensor;
pub mod vocab;

pub use container::{Container, ContainerError};
pub use model::{
    BlockKind, DecodeStrategy, ForwardOutput, GenerationParams, GenerationRecord, InterventionSpec,
    Model, ModelConfig, ModelError, PositionScope,
};
pub use tensor::Tensor;
