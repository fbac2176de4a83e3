//! Vehicle re-identification retrieval engine.
//!
//! The crate covers the numerical core of a two-stream appearance model
//! together with a spatio-temporal similarity model:
//!
//! - [`data`]: records, camera graphs, configuration and their file formats.
//! - [`attention`]: channel and spatial attention gates over dense feature maps.
//! - [`division`]: height / width / channel part division and embedding assembly.
//! - [`losses`]: label-smoothed cross-entropy, batch-hard triplet loss and a
//!   small gradient-descent trainer over a linear embedder.
//! - [`spatiotemporal`]: log-normal fitting of camera distances and time
//!   intervals and the sigmoid affinities built on them.
//! - [`retrieval`]: distance matrices, fused ranking and k-reciprocal re-ranking.
//! - [`metrics`]: mAP / CMC under the cross-camera protocol.
//! - [`synth`]: seeded synthetic camera networks for end-to-end runs.
//! - [`pipeline`]: glue used by the `reid` binary and the ablation sweeps.

pub mod attention;
pub mod data;
pub mod division;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod spatiotemporal;
pub mod synth;

pub use error::{Error, Result};
