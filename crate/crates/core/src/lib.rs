pub mod attention;
pub mod checkpoint;
pub mod corpus;
pub mod crf;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod models;
pub mod numerics;
pub mod recurrent;

pub use error::{Error, Result};
