//! Perturbation generation, norm-ranked pseudo-labels and the training objective.
//!
//! For a batch `x_1..x_m` each perturbator `l` emits `eps_l^i = g_l([x_i, n_i])`
//! with a fresh standard-normal noise scalar `n_i`. Within each perturbator the
//! `K` smallest-norm perturbations are labeled normal (0) and the rest
//! anomalous (1). The objective is
//!
//! ```text
//! L_ce   = 1/m sum_i [ CE(D(E(x_i)), 0) + 1/L sum_l CE(D(E(x_i) + eps_l^i), y_l^i) ]
//! L_norm = 1/m sum_i 1/L sum_l |eps_l^i|
//! L_div  = 1/m sum_i 1/(L(L-1)) sum_{l != k} cos(eps_l^i, eps_k^i)
//! L      = L_ce + lambda1 L_norm + lambda2 L_div  (+ L_aug with known anomalies)
//! ```
//!
//! In feature mode the perturbation is added to `x_i` before encoding.

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_value, Graph, Var};
use crate::error::{DhagError, Result};
use crate::model::{BoundModel, DhagModel, PerturbMode};
use crate::nn::Module;
use crate::tensor::Tensor;

/// Component losses of one step (or an average over steps).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_norm: f64,
    pub l_div: f64,
    pub l_aug: f64,
    pub l_total: f64,
}

impl LossReport {
    /// `l_total` minus its recomposition from the parts.
    pub fn identity_residual(&self, lambda1: f64, lambda2: f64) -> f64 {
        self.l_total - loss_total(self, lambda1, lambda2)
    }
}

/// Perturbations of one batch with their norms and pseudo-labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationBatch {
    /// `[L, m, dim]`
    pub eps: Tensor,
    /// `[L, m]`
    pub norms: Tensor,
    /// `labels[l][i]`
    pub pseudo_labels: Vec<Vec<u8>>,
}

/// One standard-normal `m x 1` noise column per perturbator.
pub fn draw_noise<R: Rng + ?Sized>(m: usize, l: usize, rng: &mut R) -> Result<Vec<Tensor>> {
    (0..l)
        .map(|_| {
            Tensor::new(
                vec![m, 1],
                (0..m).map(|_| rng.sample(StandardNormal)).collect(),
            )
        })
        .collect()
}

/// Runs every perturbator on `[x, noise_l]`. Returns one `m x dim` node per
/// perturbator.
pub(crate) fn perturb_graph(
    model: &DhagModel,
    g: &mut Graph,
    bound: &BoundModel,
    x: Var,
    noise: &[Tensor],
) -> Result<Vec<Var>> {
    let (_, d) = g.value(x).dims2()?;
    model.check_input(d)?;
    if noise.len() != model.num_perturbators() {
        return Err(DhagError::Dimension(format!(
            "{} noise columns for {} perturbators",
            noise.len(),
            model.num_perturbators()
        )));
    }
    model
        .perturbators
        .iter()
        .zip(&bound.perturbators)
        .zip(noise)
        .map(|((p, vars), n)| {
            let input = g.concat_channel(x, n)?;
            p.forward(g, vars, input)
        })
        .collect()
}

/// Stacks per-perturbator `m x dim` matrices into `[L, m, dim]`.
fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let (m, dim) = parts[0].dims2()?;
    let data = parts
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    Tensor::new(vec![parts.len(), m, dim], data)
}

/// Perturbations `[L, m, dim]` for a batch `x` (`m x d`).
pub fn generate_perturbations<R: Rng + ?Sized>(
    model: &DhagModel,
    x: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let (m, _) = x.dims2()?;
    let noise = draw_noise(m, model.num_perturbators(), rng)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false)?;
    let xv = g.constant(x.clone())?;
    let eps = perturb_graph(model, &mut g, &bound, xv, &noise)?;
    let parts: Vec<&Tensor> = eps.iter().map(|&v| g.value(v)).collect();
    stack(&parts)
}

/// Labels for one perturbator from its `m` norms: the `min(k, m)` smallest
/// get 0, the rest 1. Equal norms are ordered by ascending index.
pub fn labels_from_norms(norms: &[f64], k: usize) -> Vec<u8> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let mut labels = vec![1u8; norms.len()];
    for &i in order.iter().take(k.min(norms.len())) {
        labels[i] = 0;
    }
    labels
}

fn split_eps(eps: &Tensor) -> Result<(usize, usize, usize)> {
    match *eps.shape() {
        [l, m, dim] => Ok((l, m, dim)),
        ref s => Err(DhagError::Rank(format!(
            "perturbations must be [L, m, dim], got {s:?}"
        ))),
    }
}

fn row_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-perturbator pseudo-labels for perturbations `[L, m, dim]`.
pub fn assign_pseudo_labels(eps: &Tensor, k: usize) -> Result<PerturbationBatch> {
    let (l, m, dim) = split_eps(eps)?;
    if k > m {
        return Err(DhagError::Config(format!("k = {k} exceeds batch size {m}")));
    }
    let norms: Vec<f64> = eps.data().chunks(dim).map(row_norm).collect();
    let pseudo_labels = norms.chunks(m).map(|n| labels_from_norms(n, k)).collect();
    Ok(PerturbationBatch {
        eps: eps.clone(),
        norms: Tensor::new(vec![l, m], norms)?,
        pseudo_labels,
    })
}

/// Graph handles of the objective's parts.
pub(crate) struct ObjectiveVars {
    pub ce: Var,
    pub norm: Var,
    pub div: Var,
    pub aug: Option<Var>,
    pub total: Var,
    /// Discriminator outputs on clean and perturbed inputs, for diagnostics.
    pub probs: Var,
}

pub(crate) struct ObjectiveSpec<'a> {
    pub labels: &'a [Vec<u8>],
    pub lambda1: f64,
    pub lambda2: f64,
    pub adversarial: bool,
    pub anomalies: Option<Var>,
}

/// Records the full objective on `g` given bound parameters, a batch and its
/// perturbations.
pub(crate) fn objective_graph(
    model: &DhagModel,
    g: &mut Graph,
    bound: &BoundModel,
    x: Var,
    eps: &[Var],
    spec: &ObjectiveSpec<'_>,
) -> Result<ObjectiveVars> {
    let (m, _) = g.value(x).dims2()?;
    let l = eps.len();
    if l == 0 || spec.labels.len() != l || spec.labels.iter().any(|y| y.len() != m) {
        return Err(DhagError::Dimension(format!(
            "{l} perturbation sets and {} label rows for a batch of {m}",
            spec.labels.len()
        )));
    }

    let ce_eps: Vec<Var> = if spec.adversarial {
        eps.iter().map(|&e| g.grad_reverse(e)).collect()
    } else {
        eps.to_vec()
    };

    let mut targets = vec![0.0; m];
    targets.extend(spec.labels.iter().flatten().map(|&y| f64::from(y)));
    let mut weights = vec![1.0 / m as f64; m];
    weights.extend(std::iter::repeat_n(1.0 / (m * l) as f64, m * l));

    let probs = match model.arch.perturb_mode {
        PerturbMode::Latent => {
            let z = model.encoder.forward(g, &bound.encoder, x)?;
            let mut rows = vec![z];
            for &e in &ce_eps {
                rows.push(g.add(z, e)?);
            }
            let stacked = g.concat_rows(&rows)?;
            model
                .discriminator
                .forward(g, &bound.discriminator, stacked)?
        }
        PerturbMode::Feature => {
            let mut rows = vec![x];
            for &e in &ce_eps {
                rows.push(g.add(x, e)?);
            }
            let stacked = g.concat_rows(&rows)?;
            let z = model.encoder.forward(g, &bound.encoder, stacked)?;
            model.discriminator.forward(g, &bound.discriminator, z)?
        }
    };
    let ce_terms = g.bce(probs, &targets)?;
    let ce = g.weighted_sum(ce_terms, &weights)?;

    let mut norm_sum: Option<Var> = None;
    for &e in eps {
        let n = g.row_l2_norm(e)?;
        let s = g.sum(n);
        norm_sum = Some(match norm_sum {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let norm = g.scale(norm_sum.expect("l >= 1"), 1.0 / (m * l) as f64);

    let div = if l >= 2 {
        let mut acc: Option<Var> = None;
        for a in 0..l {
            for b in (a + 1)..l {
                let c = g.row_cosine(eps[a], eps[b])?;
                let s = g.sum(c);
                acc = Some(match acc {
                    Some(prev) => g.add(prev, s)?,
                    None => s,
                });
            }
        }
        // Each unordered pair counts for both (a, b) and (b, a).
        g.scale(acc.expect("l >= 2"), 2.0 / (m * l * (l - 1)) as f64)
    } else {
        g.constant(Tensor::scalar(0.0))?
    };

    let aug = match spec.anomalies {
        Some(xa) => Some(semi_sup_graph(model, g, bound, xa)?),
        None => None,
    };

    let weighted_norm = g.scale(norm, spec.lambda1);
    let weighted_div = g.scale(div, spec.lambda2);
    let mut total = g.add(ce, weighted_norm)?;
    total = g.add(total, weighted_div)?;
    if let Some(a) = aug {
        total = g.add(total, a)?;
    }
    Ok(ObjectiveVars {
        ce,
        norm,
        div,
        aug,
        total,
        probs,
    })
}

fn semi_sup_graph(model: &DhagModel, g: &mut Graph, bound: &BoundModel, xa: Var) -> Result<Var> {
    let (n, _) = g.value(xa).dims2()?;
    let z = model.encoder.forward(g, &bound.encoder, xa)?;
    let p = model.discriminator.forward(g, &bound.discriminator, z)?;
    let terms = g.bce(p, &vec![1.0; n])?;
    Ok(g.mean(terms))
}

fn eps_vars(g: &mut Graph, eps: &Tensor) -> Result<Vec<Var>> {
    let (l, m, dim) = split_eps(eps)?;
    (0..l)
        .map(|i| {
            let part = eps.data()[i * m * dim..(i + 1) * m * dim].to_vec();
            g.constant(Tensor::new(vec![m, dim], part)?)
        })
        .collect()
}

/// Cross-entropy part of the objective for fixed perturbations and labels.
pub fn loss_ce(
    model: &DhagModel,
    x: &Tensor,
    eps: &Tensor,
    pseudo_labels: &[Vec<u8>],
) -> Result<f64> {
    let (l, m, dim) = split_eps(eps)?;
    let (rows, _) = x.dims2()?;
    if rows != m || l != model.num_perturbators() || dim != model.arch.perturbation_dim() {
        return Err(DhagError::Dimension(format!(
            "perturbations {:?} do not fit batch {:?}",
            eps.shape(),
            x.shape()
        )));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false)?;
    let xv = g.constant(x.clone())?;
    let ev = eps_vars(&mut g, eps)?;
    let spec = ObjectiveSpec {
        labels: pseudo_labels,
        lambda1: 0.0,
        lambda2: 0.0,
        adversarial: false,
        anomalies: None,
    };
    let obj = objective_graph(model, &mut g, &bound, xv, &ev, &spec)?;
    let v = g.value(obj.ce).item()?;
    if !v.is_finite() {
        return Err(DhagError::Numerical(format!("cross-entropy loss is {v}")));
    }
    Ok(v)
}

/// Mean perturbation norm over perturbators and samples.
pub fn loss_norm(eps: &Tensor) -> Result<f64> {
    let (l, m, dim) = split_eps(eps)?;
    let total: f64 = eps.data().chunks(dim).map(row_norm).sum();
    Ok(total / (l * m) as f64)
}

/// Mean pairwise cosine similarity between perturbators, per sample.
/// Zero with a warning when there is only one perturbator.
pub fn loss_div(eps: &Tensor) -> Result<f64> {
    let (l, m, _) = split_eps(eps)?;
    if l < 2 {
        warn!("diversity loss needs at least two perturbators; using 0");
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let ev = eps_vars(&mut g, eps)?;
    let mut acc = 0.0;
    for a in 0..l {
        for b in (a + 1)..l {
            let c = g.row_cosine(ev[a], ev[b])?;
            acc += g.value(c).data().iter().sum::<f64>();
        }
    }
    Ok(acc * 2.0 / (m * l * (l - 1)) as f64)
}

/// `l_ce + lambda1 * l_norm + lambda2 * l_div + l_aug`.
pub fn loss_total(parts: &LossReport, lambda1: f64, lambda2: f64) -> f64 {
    parts.l_ce + parts.l_norm * lambda1 + parts.l_div * lambda2 + parts.l_aug
}

/// Mean cross-entropy of the score on known anomalies against label 1.
pub fn semi_sup_loss(model: &DhagModel, x_anom: &Tensor) -> Result<f64> {
    let (_, d) = x_anom.dims2()?;
    model.check_input(d)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false)?;
    let xv = g.constant(x_anom.clone())?;
    let v = semi_sup_graph(model, &mut g, &bound, xv)?;
    g.value(v).item()
}

/// Noise and pseudo-labels held fixed so the objective becomes a smooth
/// function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedDraw {
    pub noise: Vec<Tensor>,
    pub labels: Vec<Vec<u8>>,
}

impl FixedDraw {
    /// Draws noise and labels the resulting perturbations with `k`.
    pub fn sample<R: Rng + ?Sized>(
        model: &DhagModel,
        x: &Tensor,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (m, _) = x.dims2()?;
        let noise = draw_noise(m, model.num_perturbators(), rng)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false)?;
        let xv = g.constant(x.clone())?;
        let eps = perturb_graph(model, &mut g, &bound, xv, &noise)?;
        let parts: Vec<&Tensor> = eps.iter().map(|&v| g.value(v)).collect();
        let labels = assign_pseudo_labels(&stack(&parts)?, k)?.pseudo_labels;
        Ok(FixedDraw { noise, labels })
    }
}

/// Objective value and its gradient for every parameter tensor (in
/// `Module::parameters` order) under a fixed draw.
pub fn objective_gradients(
    model: &DhagModel,
    x: &Tensor,
    draw: &FixedDraw,
    lambda1: f64,
    lambda2: f64,
    anomalies: Option<&Tensor>,
) -> Result<(LossReport, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true)?;
    let xv = g.constant(x.clone())?;
    let eps = perturb_graph(model, &mut g, &bound, xv, &draw.noise)?;
    let anomalies = anomalies.map(|a| g.constant(a.clone())).transpose()?;
    let spec = ObjectiveSpec {
        labels: &draw.labels,
        lambda1,
        lambda2,
        adversarial: false,
        anomalies,
    };
    let obj = objective_graph(model, &mut g, &bound, xv, &eps, &spec)?;
    let report = LossReport {
        l_ce: g.value(obj.ce).item()?,
        l_norm: g.value(obj.norm).item()?,
        l_div: g.value(obj.div).item()?,
        l_aug: obj
            .aug
            .map(|a| g.value(a).item())
            .transpose()?
            .unwrap_or(0.0),
        l_total: g.value(obj.total).item()?,
    };
    let grads = g.backward(obj.total)?;
    let vars = bound
        .encoder
        .iter()
        .chain(&bound.discriminator)
        .chain(bound.perturbators.iter().flatten());
    let tensors = vars
        .zip(model.parameters())
        .map(|(&v, p)| {
            let data = grads
                .get(v)
                .map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec);
            Tensor::new(p.shape().to_vec(), data)
        })
        .collect::<Result<_>>()?;
    Ok((report, tensors))
}

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |a - c| / max(|a|, |c|, 1e-8)` over all parameter entries.
    pub max_rel_err: f64,
    pub worst_parameter: String,
    pub entries: usize,
}

/// Compares [`objective_gradients`] with central differences of step `h` for
/// every parameter entry of `model`.
pub fn objective_grad_check(
    model: &DhagModel,
    x: &Tensor,
    draw: &FixedDraw,
    lambda1: f64,
    lambda2: f64,
    anomalies: Option<&Tensor>,
    h: f64,
) -> Result<GradCheck> {
    let (_, analytic) = objective_gradients(model, x, draw, lambda1, lambda2, anomalies)?;
    let names = model.parameter_names();
    let mut probe = model.clone();
    let mut check = GradCheck {
        max_rel_err: 0.0,
        worst_parameter: String::new(),
        entries: 0,
    };
    for (p, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = probe.parameters()[p].data()[j];
            let mut at = |v: f64| -> Result<f64> {
                probe.parameters_mut()[p].data_mut()[j] = v;
                let (r, _) = objective_gradients(&probe, x, draw, lambda1, lambda2, anomalies)?;
                Ok(r.l_total)
            };
            let numeric = (at(orig + h)? - at(orig - h)?) / (2.0 * h);
            probe.parameters_mut()[p].data_mut()[j] = orig;
            let a = grad.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_parameter = format!("{}[{j}]", names[p]);
            }
            check.entries += 1;
        }
    }
    Ok(check)
}

/// Scalar cross-entropy, exposed for oracles and reports.
pub fn bce(p: f64, y: u8) -> Result<f64> {
    if y > 1 {
        return Err(DhagError::Label(format!("label {y} is not 0 or 1")));
    }
    Ok(bce_value(p, f64::from(y)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_examples() {
        assert_eq!(labels_from_norms(&[3.0, 1.0, 2.0], 1), vec![1, 0, 1]);
        assert_eq!(labels_from_norms(&[3.0, 1.0, 2.0], 0), vec![1, 1, 1]);
        assert_eq!(labels_from_norms(&[3.0, 1.0, 2.0], 3), vec![0, 0, 0]);
        // ties resolve by ascending index
        assert_eq!(
            labels_from_norms(&[1.0, 1.0, 1.0, 0.5], 2),
            vec![0, 1, 1, 0]
        );
    }

    #[test]
    fn assign_rejects_k_above_m() {
        let eps = Tensor::zeros(vec![2, 3, 4]);
        assert!(matches!(
            assign_pseudo_labels(&eps, 4),
            Err(DhagError::Config(_))
        ));
        let batch = assign_pseudo_labels(&eps, 2).unwrap();
        assert_eq!(batch.norms.shape(), &[2, 3]);
        assert_eq!(batch.pseudo_labels, vec![vec![0, 0, 1], vec![0, 0, 1]]);
    }

    #[test]
    fn norm_loss_examples() {
        assert_eq!(loss_norm(&Tensor::zeros(vec![2, 3, 4])).unwrap(), 0.0);
        let single = Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(loss_norm(&single).unwrap(), 5.0);
    }

    #[test]
    fn div_loss_examples() {
        let same = Tensor::new(
            vec![3, 2, 2],
            vec![1., 2., 3., 1., 1., 2., 3., 1., 1., 2., 3., 1.],
        )
        .unwrap();
        assert!((loss_div(&same).unwrap() - 1.0).abs() < 1e-12);
        let ortho = Tensor::new(vec![2, 2, 2], vec![1., 0., 0., 2., 0., 3., -1., 0.]).unwrap();
        assert_eq!(loss_div(&ortho).unwrap(), 0.0);
        let single = Tensor::new(vec![1, 2, 2], vec![1., 0., 0., 2.]).unwrap();
        assert_eq!(loss_div(&single).unwrap(), 0.0);
    }

    #[test]
    fn total_examples() {
        let r = LossReport {
            l_ce: 1.0,
            l_norm: 2.0,
            l_div: 0.5,
            l_aug: 0.0,
            l_total: 0.0,
        };
        assert!((loss_total(&r, 0.1, 0.01) - 1.205).abs() < 1e-15);
        assert_eq!(loss_total(&r, 0.0, 0.0), 1.0);
    }

    #[test]
    fn scalar_bce() {
        assert!((bce(0.5, 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(bce(0.5, 2), Err(DhagError::Label(_))));
    }
}
