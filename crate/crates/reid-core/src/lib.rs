//! Retrieval and post-processing engine for vehicle re-identification.
//!
//! The crate operates entirely on precomputed image embeddings plus
//! camera/tracklet metadata: it never touches images or model weights.
//! The inference-side pipeline it provides covers
//!
//! * ingestion and export of embedding matrices in a bit-exact binary
//!   format ([`store`]),
//! * feature-space corrections: L2 normalization, camera-mean
//!   subtraction, tracklet fusion, multi-view averaging and multi-model
//!   ensembling ([`features`]),
//! * dense pairwise distance kernels and camera/orientation distance
//!   fusion ([`distance`]),
//! * k-reciprocal re-ranking ([`rerank`]),
//! * DBSCAN pseudo-label generation over precomputed distances
//!   ([`cluster`]),
//! * ranking with camera verification and image-to-track retrieval, and
//!   mAP/CMC evaluation ([`eval`]),
//! * a declarative stage pipeline binding all of the above ([`pipeline`]).
//!
//! With the default `parallel` feature the heavy kernels fan out over
//! rayon; without it they run sequentially. Both paths produce
//! bit-identical results.

pub mod cluster;
pub mod distance;
pub mod error;
pub mod eval;
mod exec;
pub mod features;
pub mod pipeline;
pub mod rerank;
pub mod store;

pub use error::{Error, Result};
