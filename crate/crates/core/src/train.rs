//! One optimization step, the epoch loop, and scoring with a trained model.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::{stream_rng, Stream, TrainConfig};
use crate::error::{DhagError, Result};
use crate::model::{ArchConfig, Architecture, DhagModel};
use crate::nn::{Adam, Module};
use crate::objective::{
    draw_noise, labels_from_norms, objective_graph, perturb_graph, LossReport, ObjectiveSpec,
};
use crate::tensor::Tensor;

/// One Adam state per parameter group.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub encoder: Adam,
    pub discriminator: Adam,
    pub perturbators: Vec<Adam>,
}

impl Optimizers {
    pub fn new(config: &TrainConfig, num_perturbators: usize) -> Self {
        Optimizers {
            encoder: Adam::new(config.lr_encoder),
            discriminator: Adam::new(config.lr_discriminator),
            perturbators: (0..num_perturbators)
                .map(|_| Adam::new(config.lr_perturbator))
                .collect(),
        }
    }
}

/// Builds and initializes a model for `input_dim` features from the config's seed.
pub fn init_model(input_dim: usize, arch: &ArchConfig, config: &TrainConfig) -> Result<DhagModel> {
    config.validate()?;
    let arch = Architecture::new(
        input_dim,
        arch,
        config.num_perturbators,
        config.perturb_mode,
    )?;
    DhagModel::new(arch, &mut stream_rng(config.seed, Stream::Init))
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Runs one full iteration: perturb, rank and label, evaluate the objective,
/// backpropagate once and update every parameter group.
///
/// `anomalies` is the labeled sub-batch; pass `None` for unsupervised training.
/// On a non-finite loss the model is left untouched.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut DhagModel,
    batch: &Tensor,
    anomalies: Option<&Tensor>,
    config: &TrainConfig,
    opt: &mut Optimizers,
    rng: &mut R,
) -> Result<LossReport> {
    let (m, d) = batch.dims2()?;
    model.check_input(d)?;
    if let Some(a) = anomalies {
        model.check_input(a.dims2()?.1)?;
    }
    let k = config.k.min(m);

    let mut g = Graph::new();
    let bound = model.bind(&mut g, true)?;
    let x = g.constant(batch.clone())?;
    let noise = draw_noise(m, model.num_perturbators(), rng)?;
    let eps = perturb_graph(model, &mut g, &bound, x, &noise)?;

    let mut max_norm: f64 = 0.0;
    let labels: Vec<Vec<u8>> = eps
        .iter()
        .map(|&e| {
            let value = g.value(e);
            let norms: Vec<f64> = (0..m)
                .map(|i| value.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            max_norm = norms.iter().fold(max_norm, |a, &b| a.max(b));
            labels_from_norms(&norms, k)
        })
        .collect();

    let anomalies = match anomalies {
        Some(a) => Some(g.constant(a.clone())?),
        None => None,
    };
    let spec = ObjectiveSpec {
        labels: &labels,
        lambda1: config.lambda1,
        lambda2: config.lambda2,
        adversarial: config.adversarial_perturbators,
        anomalies,
    };
    let obj = objective_graph(model, &mut g, &bound, x, &eps, &spec)?;
    let report = LossReport {
        l_ce: g.value(obj.ce).item()?,
        l_norm: g.value(obj.norm).item()?,
        l_div: g.value(obj.div).item()?,
        l_aug: match obj.aug {
            Some(a) => g.value(a).item()?,
            None => 0.0,
        },
        l_total: g.value(obj.total).item()?,
    };
    if !report.l_total.is_finite() {
        let (pmin, pmax) = min_max(g.value(obj.probs).data());
        return Err(DhagError::Numerical(format!(
            "non-finite loss {report:?}; max perturbation norm {max_norm:.6e}, \
             discriminator output range [{pmin:.6e}, {pmax:.6e}]"
        )));
    }

    let grads = g.backward(obj.total)?;
    model.encoder.accumulate_grads(&grads, &bound.encoder)?;
    model
        .discriminator
        .accumulate_grads(&grads, &bound.discriminator)?;
    for (p, vars) in model.perturbators.iter_mut().zip(&bound.perturbators) {
        p.accumulate_grads(&grads, vars)?;
    }

    opt.encoder.step(&mut model.encoder.parameters_mut())?;
    opt.discriminator
        .step(&mut model.discriminator.parameters_mut())?;
    for (p, adam) in model.perturbators.iter_mut().zip(&mut opt.perturbators) {
        adam.step(&mut p.parameters_mut())?;
    }
    Ok(report)
}

/// Per-epoch mean losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub history: Vec<LossReport>,
    pub steps: usize,
}

/// Trains for `config.epochs` passes over shuffled mini-batches of `train`
/// (normal samples only). With `config.gamma > 0`, every step also fits the
/// labeled anomalies in `labeled` (at most `batch_size` of them per step).
pub fn fit(
    model: &mut DhagModel,
    train: &Tensor,
    labeled: Option<&Tensor>,
    config: &TrainConfig,
) -> Result<FitReport> {
    fit_with(model, train, labeled, config, |_, _| {})
}

/// [`fit`] with a callback after every step, given the global step index.
pub fn fit_with<F>(
    model: &mut DhagModel,
    train: &Tensor,
    labeled: Option<&Tensor>,
    config: &TrainConfig,
    mut on_step: F,
) -> Result<FitReport>
where
    F: FnMut(usize, &LossReport),
{
    config.validate()?;
    let (n, d) = train.dims2()?;
    model.check_input(d)?;
    if model.num_perturbators() != config.num_perturbators {
        return Err(DhagError::Config(format!(
            "model has {} perturbators, config asks for {}",
            model.num_perturbators(),
            config.num_perturbators
        )));
    }
    let labeled = if config.gamma > 0.0 {
        match labeled {
            Some(t) if !t.is_empty() => Some(t),
            _ => {
                return Err(DhagError::Config(
                    "gamma > 0 but no labeled anomalies were provided".into(),
                ))
            }
        }
    } else {
        None
    };

    let mut opt = Optimizers::new(config, model.num_perturbators());
    let mut shuffle_rng = stream_rng(config.seed, Stream::Shuffle);
    let mut noise_rng = stream_rng(config.seed, Stream::Noise);
    let mut labeled_rng = stream_rng(config.seed, Stream::Labeled);

    let mut report = FitReport::default();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossReport::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = train.select_rows(chunk)?;
            let anomalies = match labeled {
                Some(pool) => Some(labeled_batch(pool, config.batch_size, &mut labeled_rng)?),
                None => None,
            };
            let step = train_step(
                model,
                &batch,
                anomalies.as_ref(),
                config,
                &mut opt,
                &mut noise_rng,
            )?;
            on_step(report.steps, &step);
            report.steps += 1;
            batches += 1;
            sum.l_ce += step.l_ce;
            sum.l_norm += step.l_norm;
            sum.l_div += step.l_div;
            sum.l_aug += step.l_aug;
            sum.l_total += step.l_total;
        }
        let b = batches as f64;
        report.history.push(LossReport {
            l_ce: sum.l_ce / b,
            l_norm: sum.l_norm / b,
            l_div: sum.l_div / b,
            l_aug: sum.l_aug / b,
            l_total: sum.l_total / b,
        });
    }
    Ok(report)
}

fn labeled_batch<R: Rng + ?Sized>(pool: &Tensor, size: usize, rng: &mut R) -> Result<Tensor> {
    let (n, _) = pool.dims2()?;
    if n <= size {
        return Ok(pool.clone());
    }
    let picked = rand::seq::index::sample(rng, n, size).into_vec();
    pool.select_rows(&picked)
}

/// Latent representations `f_theta(x)`.
pub fn encode(model: &DhagModel, x: &Tensor) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    model.check_input(d)?;
    let mut g = Graph::new();
    let vars = model.encoder.bind(&mut g, false)?;
    let xv = g.constant(x.clone())?;
    let z = model.encoder.forward(&mut g, &vars, xv)?;
    Ok(g.value(z).clone())
}

/// Probability of being anomalous, `f_phi(f_theta(x))`, per row.
pub fn anomaly_score(model: &DhagModel, x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    model.check_input(d)?;
    let mut g = Graph::new();
    let enc = model.encoder.bind(&mut g, false)?;
    let disc = model.discriminator.bind(&mut g, false)?;
    let xv = g.constant(x.clone())?;
    let z = model.encoder.forward(&mut g, &enc, xv)?;
    let p = model.discriminator.forward(&mut g, &disc, z)?;
    g.value(p).reshape(vec![n])
}

/// `1` where `score > delta`, else `0`.
pub fn classify(scores: &Tensor, delta: f64) -> Result<Vec<u8>> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(DhagError::Config(format!(
            "threshold must be in (0, 1), got {delta}"
        )));
    }
    Ok(scores.data().iter().map(|&s| u8::from(s > delta)).collect())
}
