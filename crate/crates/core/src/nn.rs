//! Layers, parameter initialization and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{DhagError, Result};
use crate::tensor::Tensor;

/// Anything owning trainable tensors, in a fixed order.
pub trait Module {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Records every parameter as a leaf. With `track = false` the leaves are
    /// constants (inference).
    fn bind(&self, g: &mut Graph, track: bool) -> Result<Vec<Var>> {
        self.parameters()
            .into_iter()
            .map(|p| g.leaf(p.clone(), track))
            .collect()
    }

    /// Adds the gradients of a backward pass into the parameters' grad slots.
    fn accumulate_grads(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        let params = self.parameters_mut();
        if params.len() != vars.len() {
            return Err(DhagError::State(format!(
                "{} parameters bound as {} vars",
                params.len(),
                vars.len()
            )));
        }
        for (p, &v) in params.into_iter().zip(vars) {
            grads.accumulate_into(v, p)?;
        }
        Ok(())
    }

    fn zero_grads(&mut self) {
        self.parameters_mut()
            .into_iter()
            .for_each(Tensor::zero_grad);
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`; variance `2 / fan_in`. For weights feeding relu.
    KaimingUniform,
    /// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`; variance `2 / (fan_in + fan_out)`.
    XavierUniform,
    Zeros,
}

impl Init {
    pub fn bound(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Init::KaimingUniform => (6.0 / fan_in as f64).sqrt(),
            Init::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            Init::Zeros => 0.0,
        }
    }

    pub fn variance(self, fan_in: usize, fan_out: usize) -> f64 {
        let b = self.bound(fan_in, fan_out);
        b * b / 3.0
    }
}

/// Draws a tensor of `shape` under `scheme`. Fan-in/out follow the usual
/// convention: `shape[1] * receptive` and `shape[0] * receptive`.
pub fn init_params<R: Rng + ?Sized>(shape: Vec<usize>, scheme: Init, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    if scheme == Init::Zeros {
        return Tensor::zeros(shape);
    }
    let receptive: usize = shape.iter().skip(2).product();
    let fan_out = shape[0] * receptive;
    let fan_in = shape.get(1).copied().unwrap_or(1) * receptive;
    let b = scheme.bound(fan_in, fan_out);
    let data = (0..n).map(|_| rng.random_range(-b..b)).collect();
    Tensor::new(shape, data).expect("init_params shape")
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, scheme: Init, rng: &mut R) -> Self {
        Linear {
            weight: init_params(vec![output, input], scheme, rng),
            bias: Tensor::zeros(vec![output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `vars` are this layer's bound parameters (weight, bias).
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let (_, cols) = g.value(x).dims2()?;
        if cols != self.input_dim() {
            return Err(DhagError::Dimension(format!(
                "linear layer expects {} features, got {cols}",
                self.input_dim()
            )));
        }
        let wt = g.transpose(vars[0])?;
        let y = g.matmul(x, wt)?;
        g.add(y, vars[1])
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        width: usize,
        stride: usize,
        padding: usize,
        scheme: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if stride == 0 || width == 0 {
            return Err(DhagError::Config(
                "conv1d stride and width must be positive".into(),
            ));
        }
        Ok(Conv1d {
            kernels: init_params(vec![out_ch, in_ch, width], scheme, rng),
            bias: Tensor::zeros(vec![out_ch]),
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.kernels.shape()[2]
    }

    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        let padded = input_len + 2 * self.padding;
        (padded >= self.width()).then(|| (padded - self.width()) / self.stride + 1)
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        g.conv1d(x, vars[0], vars[1], self.stride, self.padding)
    }
}

impl Module for Conv1d {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.kernels, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernels, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
        }
    }

    fn init(self) -> Init {
        if self == Activation::Relu {
            Init::KaimingUniform
        } else {
            Init::XavierUniform
        }
    }
}

/// Stack of linear layers with one hidden activation and one output activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `sizes` lists every width from input to output, so it needs at least two entries.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(DhagError::Config(format!("invalid MLP sizes {sizes:?}")));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { output } else { hidden };
                Linear::new(w[0], w[1], act.init(), rng)
            })
            .collect();
        Ok(Mlp {
            layers,
            hidden,
            output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &vars[2 * i..2 * i + 2], h)?;
            h = if i == last {
                self.output.apply(g, h)
            } else {
                self.hidden.apply(g, h)
            };
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Module::parameters).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(Module::parameters_mut)
            .collect()
    }
}

/// Adam with bias correction. One instance per parameter group.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the params' grad slots, then clears them.
    /// Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(DhagError::State(format!("parameter {i} has no gradient")));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len()
            || self
                .m
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.len())
        {
            return Err(DhagError::State(
                "parameter shapes changed between Adam steps".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().expect("checked above").to_vec();
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_forward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = Linear::new(2, 2, Init::XavierUniform, &mut rng);
        layer.weight = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        let mut g = Graph::new();
        let vars = layer.bind(&mut g, false).unwrap();
        let x = g
            .constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap())
            .unwrap();
        let y = layer.forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);

        let layer = Linear {
            weight: Tensor::new(vec![1, 2], vec![1., 1.]).unwrap(),
            bias: Tensor::zeros(vec![1]),
        };
        let mut g = Graph::new();
        let vars = layer.bind(&mut g, false).unwrap();
        let x = g
            .constant(Tensor::new(vec![1, 2], vec![2., 3.]).unwrap())
            .unwrap();
        let y = layer.forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(y).data(), &[5.]);
        let bad = g.constant(Tensor::zeros(vec![1, 3])).unwrap();
        assert!(layer.forward(&mut g, &vars, bad).is_err());
    }

    #[test]
    fn conv1d_examples() {
        let conv = Conv1d {
            kernels: Tensor::new(vec![1, 1, 2], vec![1., 1.]).unwrap(),
            bias: Tensor::zeros(vec![1]),
            stride: 1,
            padding: 0,
        };
        let mut g = Graph::new();
        let vars = conv.bind(&mut g, false).unwrap();
        let x = g
            .constant(Tensor::new(vec![1, 1, 3], vec![1., 2., 3.]).unwrap())
            .unwrap();
        let y = conv.forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(y).data(), &[3., 5.]);

        let wide = Conv1d {
            kernels: Tensor::zeros(vec![1, 1, 5]),
            bias: Tensor::zeros(vec![1]),
            stride: 1,
            padding: 0,
        };
        let vars = wide.bind(&mut g, false).unwrap();
        assert!(matches!(
            wide.forward(&mut g, &vars, x),
            Err(DhagError::Dimension(_))
        ));
    }

    #[test]
    fn conv1d_unit_kernel_is_identity() {
        let conv = Conv1d {
            kernels: Tensor::new(vec![2, 2, 1], vec![1., 0., 0., 1.]).unwrap(),
            bias: Tensor::zeros(vec![2]),
            stride: 1,
            padding: 0,
        };
        let input = Tensor::new(vec![1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut g = Graph::new();
        let vars = conv.bind(&mut g, false).unwrap();
        let x = g.constant(input.clone()).unwrap();
        let y = conv.forward(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(y).data(), input.data());
    }

    #[test]
    fn bias_init_zero_and_seeded_determinism() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let la = Linear::new(4, 3, Init::KaimingUniform, &mut a);
        let lb = Linear::new(4, 3, Init::KaimingUniform, &mut b);
        assert_eq!(la, lb);
        assert!(la.bias.data().iter().all(|&x| x == 0.0));
        assert!(init_params(vec![3, 3], Init::Zeros, &mut a)
            .data()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn init_variance_matches_scheme() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (scheme, shape) in [
            (Init::KaimingUniform, vec![100, 100]),
            (Init::XavierUniform, vec![100, 100]),
            (Init::KaimingUniform, vec![25, 8, 50]),
        ] {
            let t = init_params(shape.clone(), scheme, &mut rng);
            assert_eq!(t.len(), 10_000);
            let n = t.len() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let receptive: usize = shape.iter().skip(2).product();
            let target = scheme.variance(shape[1] * receptive, shape[0] * receptive);
            assert!(
                (var / target - 1.0).abs() < 0.1,
                "{scheme:?}: var {var} target {target}"
            );
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        p.accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(opt.steps(), 1);
        assert!(p.grad().is_none());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let lr = 0.01;
        for g in [3.0, -0.2] {
            let mut p = Tensor::scalar(0.0);
            p.accumulate_grad(&[g]).unwrap();
            Adam::new(lr).step(&mut [&mut p]).unwrap();
            // m_hat = g, v_hat = g^2  =>  delta = -lr * g / (|g| + eps)
            let expected = -lr * g / (g.abs() + 1e-8);
            assert!((p.item().unwrap() - expected).abs() < 1e-15);
            assert!((p.item().unwrap().abs() - lr).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut w = Tensor::scalar(0.0);
        let mut opt = Adam::new(0.01);
        for _ in 0..2000 {
            let g = 2.0 * (w.item().unwrap() - 3.0);
            w.accumulate_grad(&[g]).unwrap();
            opt.step(&mut [&mut w]).unwrap();
        }
        assert!(
            (w.item().unwrap() - 3.0).abs() < 0.01,
            "{}",
            w.item().unwrap()
        );
    }

    #[test]
    fn adam_errors_and_zero_lr() {
        let mut p = Tensor::scalar(1.0);
        assert!(matches!(
            Adam::new(0.1).step(&mut [&mut p]),
            Err(DhagError::State(_))
        ));
        let mut opt = Adam::new(0.0);
        for g in [1.0, -5.0, 0.3] {
            p.accumulate_grad(&[g]).unwrap();
            opt.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.item().unwrap(), 1.0);
    }
}
