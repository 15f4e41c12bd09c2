//! Spectral emotion recognition in conversation: multimodal interaction
//! graphs, low/high-pass Fourier graph operators and a contrastive objective.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoding;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod params;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
pub use params::ParamSet;
