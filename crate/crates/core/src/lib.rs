//! Object-graph reasoning over video for question answering.
//!
//! The crate is self-contained: a small tape-based autodiff engine over
//! `f64` tensors ([`tensor`]), object-graph construction from detections
//! ([`video_graph`]), the dynamic graph transformer ([`dgt`]), a text
//! encoder ([`text`]), QA heads ([`qa`]) and pretraining losses
//! ([`pretrain`]), assembled into a full model in [`model`].

pub mod attention;
pub mod config;
pub mod dgt;
pub mod error;
pub mod model;
pub mod pretrain;
pub mod qa;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod video_graph;

pub use error::{Error, Result};
pub use model::{EncodedQa, Vgt};
