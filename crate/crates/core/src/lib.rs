//! Object-slot learning with a slot-conditioned autoregressive decoder,
//! a pixel-mixture baseline, concept libraries for slot-prompt composition
//! and the evaluation tools around them.

pub mod checkpoint;
pub mod concept;
pub mod config;
pub mod data;
pub mod decoder;
pub mod dvae;
mod error;
pub mod eval;
pub mod experiments;
pub mod image;
pub mod mixture;
pub mod model;
pub mod nn;
pub mod rng;
pub mod slot_attention;
pub mod training;

pub use error::{Error, Result};
pub use slotgen_tensor as tensor;
