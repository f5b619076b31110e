//! Self-supervised and supervised music representation learning: log-mel
//! front end, track catalog and synthetic corpus, snippet sampling, a small
//! reverse-mode autodiff engine, the convolutional encoder, pre-training,
//! embedding extraction, downstream probes and their metrics.

pub mod autodiff;
pub mod catalog;
pub mod config;
pub mod dsp;
pub mod embedder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod prober;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
