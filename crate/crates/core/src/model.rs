//! Encoder, discriminator and the set of input-conditioned perturbators.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{DhagError, Result};
use crate::nn::{Activation, Conv1d, Init, Linear, Mlp, Module};
use crate::tensor::Tensor;

/// Where perturbations are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    /// `z + eps`, with `eps` in the encoder's latent space.
    #[default]
    Latent,
    /// `f(x + eps)`, with `eps` in input feature space.
    Feature,
}

impl std::str::FromStr for PerturbMode {
    type Err = DhagError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(PerturbMode::Latent),
            "feature" => Ok(PerturbMode::Feature),
            other => Err(DhagError::Config(format!(
                "perturb mode must be `latent` or `feature`, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbatorKind {
    /// Width-1 1D convolutions over the `(d+1)`-channel, length-1 signal.
    #[default]
    Conv1d,
    Mlp,
}

/// Layer sizes that are not determined by the data or the training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub perturbator_hidden: Vec<usize>,
    pub perturbator_kind: PerturbatorKind,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            latent_dim: 32,
            encoder_hidden: vec![64],
            discriminator_hidden: vec![32],
            perturbator_hidden: vec![32, 32],
            perturbator_kind: PerturbatorKind::Conv1d,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub perturbator_hidden: Vec<usize>,
    pub perturbator_kind: PerturbatorKind,
    pub num_perturbators: usize,
    pub perturb_mode: PerturbMode,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        arch: &ArchConfig,
        num_perturbators: usize,
        perturb_mode: PerturbMode,
    ) -> Result<Self> {
        let a = Architecture {
            input_dim,
            latent_dim: arch.latent_dim,
            encoder_hidden: arch.encoder_hidden.clone(),
            discriminator_hidden: arch.discriminator_hidden.clone(),
            perturbator_hidden: arch.perturbator_hidden.clone(),
            perturbator_kind: arch.perturbator_kind,
            num_perturbators,
            perturb_mode,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(DhagError::Config(
                "input and latent dims must be positive".into(),
            ));
        }
        if self.num_perturbators == 0 {
            return Err(DhagError::Config("need at least one perturbator".into()));
        }
        let widths = self
            .encoder_hidden
            .iter()
            .chain(&self.discriminator_hidden)
            .chain(&self.perturbator_hidden);
        if widths.clone().any(|&w| w == 0) {
            return Err(DhagError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Dimension of each perturbation vector.
    pub fn perturbation_dim(&self) -> usize {
        match self.perturb_mode {
            PerturbMode::Latent => self.latent_dim,
            PerturbMode::Feature => self.input_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PerturbatorBody {
    Conv(Vec<Conv1d>),
    Mlp(Vec<Linear>),
}

/// `g_psi`: maps `[x, noise]` (width `d + 1`) to a perturbation vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbator {
    pub body: PerturbatorBody,
    pub head: Linear,
}

impl Perturbator {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        kind: PerturbatorKind,
        rng: &mut R,
    ) -> Result<Self> {
        let mut width = input_dim + 1;
        let body = match kind {
            PerturbatorKind::Conv1d => {
                let mut convs = Vec::new();
                for &h in hidden {
                    convs.push(Conv1d::new(width, h, 1, 1, 0, Init::KaimingUniform, rng)?);
                    width = h;
                }
                PerturbatorBody::Conv(convs)
            }
            PerturbatorKind::Mlp => {
                let mut layers = Vec::new();
                for &h in hidden {
                    layers.push(Linear::new(width, h, Init::KaimingUniform, rng));
                    width = h;
                }
                PerturbatorBody::Mlp(layers)
            }
        };
        let head = Linear::new(width, output_dim, Init::XavierUniform, rng);
        Ok(Perturbator { body, head })
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    /// `input` is the `m x (d+1)` matrix of features with the noise column appended.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], input: Var) -> Result<Var> {
        let (m, w) = g.value(input).dims2()?;
        let mut offset = 0;
        let h = match &self.body {
            PerturbatorBody::Conv(convs) => {
                let mut h = g.reshape(input, vec![m, w, 1])?;
                for conv in convs {
                    h = conv.forward(g, &vars[offset..offset + 2], h)?;
                    h = g.relu(h);
                    offset += 2;
                }
                let channels = g.value(h).shape()[1];
                g.reshape(h, vec![m, channels])?
            }
            PerturbatorBody::Mlp(layers) => {
                let mut h = input;
                for layer in layers {
                    h = layer.forward(g, &vars[offset..offset + 2], h)?;
                    h = g.relu(h);
                    offset += 2;
                }
                h
            }
        };
        self.head.forward(g, &vars[offset..offset + 2], h)
    }

    fn named(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        match &self.body {
            PerturbatorBody::Conv(convs) => {
                for i in 0..convs.len() {
                    names.push(format!("{prefix}.conv.{i}.kernels"));
                    names.push(format!("{prefix}.conv.{i}.bias"));
                }
            }
            PerturbatorBody::Mlp(layers) => {
                for i in 0..layers.len() {
                    names.push(format!("{prefix}.linear.{i}.weight"));
                    names.push(format!("{prefix}.linear.{i}.bias"));
                }
            }
        }
        names.push(format!("{prefix}.head.weight"));
        names.push(format!("{prefix}.head.bias"));
        names
    }
}

impl Module for Perturbator {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = match &self.body {
            PerturbatorBody::Conv(c) => c.iter().flat_map(Module::parameters).collect(),
            PerturbatorBody::Mlp(l) => l.iter().flat_map(Module::parameters).collect(),
        };
        out.extend(self.head.parameters());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = match &mut self.body {
            PerturbatorBody::Conv(c) => c.iter_mut().flat_map(Module::parameters_mut).collect(),
            PerturbatorBody::Mlp(l) => l.iter_mut().flat_map(Module::parameters_mut).collect(),
        };
        out.extend(self.head.parameters_mut());
        out
    }
}

/// Encoder `f_theta`, discriminator `f_phi` and perturbators `g_psi_1..L`.
#[derive(Clone, Debug, PartialEq)]
pub struct DhagModel {
    pub arch: Architecture,
    pub encoder: Mlp,
    pub discriminator: Mlp,
    pub perturbators: Vec<Perturbator>,
}

/// Graph handles for one model binding.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: Vec<Var>,
    pub discriminator: Vec<Var>,
    pub perturbators: Vec<Vec<Var>>,
}

impl DhagModel {
    /// Initializes all networks from `rng` in the order encoder,
    /// discriminator, perturbators.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut enc_sizes = vec![arch.input_dim];
        enc_sizes.extend(&arch.encoder_hidden);
        enc_sizes.push(arch.latent_dim);
        let encoder = Mlp::new(&enc_sizes, Activation::Relu, Activation::Identity, rng)?;

        let mut disc_sizes = vec![arch.latent_dim];
        disc_sizes.extend(&arch.discriminator_hidden);
        disc_sizes.push(1);
        let discriminator = Mlp::new(&disc_sizes, Activation::Relu, Activation::Sigmoid, rng)?;

        let perturbators = (0..arch.num_perturbators)
            .map(|_| {
                Perturbator::new(
                    arch.input_dim,
                    &arch.perturbator_hidden,
                    arch.perturbation_dim(),
                    arch.perturbator_kind,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(DhagModel {
            arch,
            encoder,
            discriminator,
            perturbators,
        })
    }

    pub fn num_perturbators(&self) -> usize {
        self.perturbators.len()
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn bind(&self, g: &mut Graph, track: bool) -> Result<BoundModel> {
        Ok(BoundModel {
            encoder: self.encoder.bind(g, track)?,
            discriminator: self.discriminator.bind(g, track)?,
            perturbators: self
                .perturbators
                .iter()
                .map(|p| p.bind(g, track))
                .collect::<Result<_>>()?,
        })
    }

    pub fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.arch.input_dim {
            return Err(DhagError::Dimension(format!(
                "model expects {} features, got {cols}",
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// Stable names for every parameter tensor, in `parameters()` order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, mlp) in [
            ("encoder", &self.encoder),
            ("discriminator", &self.discriminator),
        ] {
            for i in 0..mlp.layers.len() {
                names.push(format!("{prefix}.{i}.weight"));
                names.push(format!("{prefix}.{i}.bias"));
            }
        }
        for (l, p) in self.perturbators.iter().enumerate() {
            names.extend(p.named(&format!("perturbator.{l}")));
        }
        names
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        self.parameter_names()
            .into_iter()
            .zip(self.parameters())
            .collect()
    }
}

impl Module for DhagModel {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.parameters();
        out.extend(self.discriminator.parameters());
        for p in &self.perturbators {
            out.extend(p.parameters());
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.parameters_mut();
        out.extend(self.discriminator.parameters_mut());
        for p in &mut self.perturbators {
            out.extend(p.parameters_mut());
        }
        out
    }
}
