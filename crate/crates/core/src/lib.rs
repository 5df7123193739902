//! Neuron-level repair of next-token prediction failures in a miniature
//! decoder-only transformer.
//!
//! A repair session locates FFN hidden units that are both active and
//! influential for a failing prediction, solves a least-squares weight
//! delta that steers the last-position representation from the argmax
//! token's output-side semantic basis towards the target's, and applies
//! it through a sign-from-gradient, magnitude-from-prior update.

pub mod error;
pub mod linalg;
pub mod evaluate;
pub mod semantics;
pub mod attribution;
pub mod patch;
pub mod data;
pub mod testbed;
pub mod model;
pub mod optimize;
pub mod repair;

pub use error::{CheckpointError, Error, Result};
pub use linalg::{Matrix, Vector};
pub use model::{ForwardTrace, GradientTrace, ModelConfig, TinyLM};
