//! Decoupled knowledge distillation for speaker-verification students,
//! together with a synthetic teacher/student testbed.
//!
//! The crate is layered bottom-up: [`numerics`] provides stable softmax/KL
//! primitives and seeded random streams, [`losses`] the classification and
//! distillation objectives, [`models`] a small MLP embedder with a cosine
//! head, [`data`] the synthetic speaker universe, [`trainer`] the SGD loops,
//! [`eval`] EER/minDCF scoring, and [`experiment`] the config-driven commands
//! behind the `dkd` binary.

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
