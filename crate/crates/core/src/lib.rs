//! Unsupervised anomaly detection by discriminating normal samples from
//! learned, input-conditioned latent perturbations.
//!
//! An encoder maps samples to a latent space, `L` perturbators propose
//! perturbation vectors for each sample, and a discriminator learns to tell
//! clean latents (and the smallest-norm perturbed ones) from the remaining
//! perturbed latents. Norm and cosine-diversity penalties keep the synthetic
//! anomalies close to the data and spread over different directions. The
//! trained `discriminator ∘ encoder` is the anomaly score.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objective;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use data::{Dataset, SplitSpec};
pub use error::{DhagError, Result};
pub use eval::MetricReport;
pub use model::{ArchConfig, Architecture, DhagModel, PerturbMode, PerturbatorKind};
pub use objective::{LossReport, PerturbationBatch};
pub use tensor::Tensor;
