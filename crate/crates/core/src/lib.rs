//! Research toolkit for studying compression-resistant backdoor attacks on
//! image classifiers: trigger generation, lossy-codec pipelines, dataset
//! poisoning, feature-consistency training and an evaluation harness.

pub mod codec;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod image;
pub mod model;
pub mod poison;
pub mod rng;
pub mod train;
pub mod trigger;

pub use codec::{CodecVersions, CompressionSpec};
pub use error::{Error, Result};
pub use image::ImageTensor;
