use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DhagError, Result};
use crate::model::PerturbMode;

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the perturbation-norm loss.
    pub lambda1: f64,
    /// Weight of the perturbation-diversity loss.
    pub lambda2: f64,
    /// Perturbations per perturbator and batch labeled as augmented normals.
    pub k: usize,
    pub num_perturbators: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_discriminator: f64,
    pub lr_perturbator: f64,
    pub epochs: usize,
    pub seed: u64,
    pub perturb_mode: PerturbMode,
    /// Known-anomaly ratio `N_s / (N_tr + N_s)`; 0 means unsupervised.
    pub gamma: f64,
    /// Reverse the cross-entropy gradient reaching the perturbators.
    pub adversarial_perturbators: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.1,
            lambda2: 0.1,
            k: 50,
            num_perturbators: 3,
            batch_size: 512,
            lr_encoder: 5e-3,
            lr_discriminator: 5e-3,
            lr_perturbator: 1e-5,
            epochs: 200,
            seed: 0,
            perturb_mode: PerturbMode::Latent,
            gamma: 0.0,
            adversarial_perturbators: false,
        }
    }
}

/// Candidate values used by hyperparameter grid search.
pub const LAMBDA_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1e0];
pub const K_GRID: [usize; 3] = [30, 50, 100];
pub const L_GRID: [usize; 3] = [3, 5, 10];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(DhagError::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )))
            }
        };
        nonneg("lambda1", self.lambda1)?;
        nonneg("lambda2", self.lambda2)?;
        nonneg("lr_encoder", self.lr_encoder)?;
        nonneg("lr_discriminator", self.lr_discriminator)?;
        nonneg("lr_perturbator", self.lr_perturbator)?;
        if self.num_perturbators == 0 {
            return Err(DhagError::Config("num_perturbators must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(DhagError::Config("batch_size must be >= 1".into()));
        }
        if self.k > self.batch_size {
            return Err(DhagError::Config(format!(
                "k = {} exceeds batch_size = {}",
                self.k, self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(DhagError::Config(format!(
                "gamma must be in [0, 1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Shuffle = 1,
    Noise = 2,
    Labeled = 3,
    Split = 4,
    Eval = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
