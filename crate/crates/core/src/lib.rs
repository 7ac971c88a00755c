//! Multi-modal knowledge graph completion toolkit.
//!
//! The crate trains and evaluates a rotation-based link predictor over
//! knowledge graphs whose entities carry feature vectors in an arbitrary
//! set of modalities (image, text, numeric, audio, video, ...). Entity
//! representations are built by relation-guided adaptive fusion of the
//! per-modality embeddings, and the imbalanced modality information is
//! augmented by a Wasserstein adversarial game between a synthetic-embedding
//! generator and the score function itself.
//!
//! Module map:
//! - [`tensor`]: dense f64 tensors with reverse-mode automatic differentiation
//! - [`data`]: dataset ingestion, synthetic graph generation, imbalance drops
//! - [`model`]: modality projection, adaptive fusion, rotation scoring, losses
//! - [`adversarial`]: generator, adversarial losses, gradient penalty, steps
//! - [`train`]: negative sampling, Adam, the training loop
//! - [`eval`]: filtered link-prediction ranking and metrics
//! - [`checkpoint`]: binary tensor snapshots plus a JSON manifest
//! - [`config`]: run configuration (TOML file + CLI overrides)

pub mod adversarial;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod math;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;
