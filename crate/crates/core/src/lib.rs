pub mod error;
pub mod generation;
pub mod harness;
pub mod raggraph;
pub mod retrieval;
pub mod scheduler;
pub mod similarity;
pub mod tiered_cache;
pub mod vector_index;

pub use error::{Error, Result};
