pub mod annotator;
pub mod corpus;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod mlm;
pub mod mutation;
pub mod params;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
