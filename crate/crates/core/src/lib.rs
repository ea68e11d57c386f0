//! Idiomatic multi-word expression detection.
//!
//! The pipeline: load task-format data ([`corpus`]), mark undeformed MWE
//! occurrences ([`preprocess`]), tokenize ([`tokenizer`]), encode and classify
//! with a small transformer ([`encoder`]), train it with cross-entropy plus
//! optional R-drop, FGM and contrastive terms ([`training`]), override
//! predictions for single-label training MWEs ([`postprocess`]) and score with
//! Macro F1 ([`eval`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the `f32` types used for training and checkpoints.

pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod io;
pub mod postprocess;
pub mod preprocess;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision encoder, the training and checkpoint default.
pub type Encoder = encoder::Encoder<f32>;
/// Double-precision encoder, used for gradient checks.
pub type Encoder64 = encoder::Encoder<f64>;
pub type Checkpoint = encoder::Checkpoint<f32>;
pub type Params = encoder::Params<f32>;
