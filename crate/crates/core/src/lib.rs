//! Urban region embedding from three region-correlation graphs.
//!
//! The pipeline: ingest trips, adjacency and POIs ([`ingest`]); turn them into
//! accessibility, vicinity and functionality correlation matrices and kNN
//! graphs ([`correlation`], [`kg`]); encode each graph with graph attention
//! ([`gat`]); fuse the three streams with a gated encoder and per-graph
//! cross-attention decoders ([`fusion`]); train jointly ([`training`]); and
//! score the resulting embeddings on clustering and popularity regression
//! ([`evaluation`]). [`synth`] generates planted-structure test cities and
//! [`pipeline`] chains everything for the CLI.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod geometry;
pub mod ingest;
pub mod correlation;
pub mod kg;
pub mod gat;
pub mod fusion;
pub mod training;
pub mod evaluation;
pub mod synth;
pub mod pipeline;
