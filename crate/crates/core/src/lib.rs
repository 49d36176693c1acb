//! Location embeddings learned by contrastively aligning coordinates with
//! frozen text embeddings of point-of-interest descriptions.
//!
//! The pipeline is: [`poi`] records are rendered into descriptions and
//! paired with vectors from an [`embedding::EmbeddingStore`]; the
//! [`encoder`] maps normalized coordinates to unit embeddings; the
//! [`trainer`] fits encoder and text projection with a symmetric InfoNCE
//! objective; [`eval`] probes the frozen embeddings on land-use and
//! distribution tasks, and [`retrieval`] ranks locations against text
//! queries.

pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod poi;
pub mod retrieval;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
