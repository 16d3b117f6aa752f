pub mod balancing;
pub mod cli;
pub mod datasets;
pub mod embedding;
pub mod error;
pub mod evalsuite;
pub mod io;
pub mod losses;
pub mod mining;
pub mod recipe;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use embedding::{Embedding, EmbeddingStore, MrlDims};
pub use error::{Error, Result};
