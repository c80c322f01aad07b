//! A dual-stream spatiotemporal Transformer for video salient object
//! detection, built on a small reverse-mode autodiff engine.
//!
//! The pipeline: video frames and past saliency maps are sampled into clips
//! ([`datapipe`]), the frames are masked by the saliency prior and both
//! streams are cut into tubelet tokens ([`tokenizer`]), the [`model`] encodes
//! each stream, fuses them and decodes a saliency map per frame, and the
//! [`trainer`] fits it and scores it with [`metrics`].

pub mod checkpoint;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Float, Graph, Tensor, Var};
