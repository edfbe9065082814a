//! Permutation alignment and interpolation of independently trained
//! Transformer encoders.
//!
//! The pipeline: train two models on the same masked-language-modeling data
//! ([`trainer`]), stream feature correlations between them
//! ([`activations`]), solve assignment problems over those correlations
//! ([`assignment`], [`align`]) to permute one model onto the other without
//! changing its function, then scan the linear path between them
//! ([`merge`]).

pub mod activations;
pub mod align;
pub mod assignment;
pub mod container;
pub mod merge;
pub mod model;
pub mod numerics;
pub mod trainer;
