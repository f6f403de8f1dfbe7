//! Interpretable spectral variational autoencoder (ISVAE) and the clustering
//! harness built around its filter-bank encoding.
//!
//! A sequential bank of Gaussian band filters, each centred by an attention
//! branch, summarises a DCT spectrum by its centre frequencies `f0`. A VAE
//! reconstructs the whole spectrum from `f0` alone, which shapes `f0` into a
//! compact space for clustering.

pub mod clustering;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod spectral;
pub mod training;

pub use datagen::{Dataset, Domain, SplitSpec, SyntheticSpec};
pub use error::{Error, Result};
pub use model::{Checkpoint, DecoderKind, IsvaeModel, ModelConfig, VaeModel, VanillaVae};
pub use spectral::{Periodogram, Spectrum, TimeSignal};
pub use training::{TrainConfig, TrainingTrace};

