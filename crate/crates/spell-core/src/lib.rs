//! Active speaker detection over spatial-temporal face-box graphs.
//!
//! The pipeline turns per-frame face boxes with precomputed audio-visual
//! features into long-range temporal graphs, classifies each node
//! (face box) as speaking or not with a three-stream graph network, and
//! evaluates predictions with average precision.
//!
//! Modules:
//! * [`tensor`] — dense kernels and layers with hand-derived backwards;
//! * [`graph`] — chunking and forward/undirected/backward edge builds;
//! * [`model`] — the two-layer three-stream network;
//! * [`train`] — Adam, cosine schedule, the training loop;
//! * [`eval`] — average precision, ablations and sweeps;
//! * [`io`] — track/feature/checkpoint/config file formats and the
//!   synthetic benchmark generator.

pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Result, SpellError};
