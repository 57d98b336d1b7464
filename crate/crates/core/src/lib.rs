//! Graph transformers on citation graphs: linkless subgraph batching over
//! PageRank-intimate contexts, a graph transformer encoder, label-free
//! pre-training, node classification and clustering.

mod binio;
pub mod clustering;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod graph;
mod init;
pub mod model;
pub mod objectives;
pub mod preprocess;

pub use error::{Error, Result};
