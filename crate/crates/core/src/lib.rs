//! Grouped low-rank adaptation with instruction-conditioned gating, trained
//! on synthetic multimodal data with known core and spurious feature groups.
//!
//! The crate is self-contained: [`tensor`] and [`tape`] provide f64 tensors
//! with reverse-mode differentiation, [`adapters`] the grouped LoRA layer,
//! [`instructions`] the template banks and gate encoder, [`synthdata`] the
//! benchmark generator, [`model`] and [`training`] the classifiers and their
//! objective, [`metrics`] the reliance instruments, and [`pipeline`] the
//! manifest-driven experiment runner behind the `filora` binary.

pub mod adapters;
pub mod error;
pub mod gradcheck;
pub mod instructions;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
