//! Phonetic self-attention at desk scale.
//!
//! This crate implements the five attention-score variants M1-M5 (M2 being
//! the vanilla query-key dot product and M5 the phonetic form that splits
//! the score into PReLU-gated similarity and content terms), a small
//! transformer encoder that runs the phonetic variant in its lower layers,
//! a synthetic frame-level phoneme-classification harness, and analysis
//! tools for attention maps (class-to-class attention, entropy, PReLU
//! slopes).

pub mod analysis;
pub mod attention;
pub mod encoder;
pub mod error;
pub mod io;
pub mod numeric;
pub mod phoneme;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
