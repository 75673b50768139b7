use dhag_core::autodiff::{grad_check, Graph};
use dhag_core::config::{stream_rng, Stream};
use dhag_core::nn::{Adam, Conv1d, Init, Linear, Module};
use dhag_core::Tensor;
use proptest::prelude::*;

fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Vec<f64> {
    let (n, c, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, w) = (k.shape()[0], k.shape()[2]);
    let out_len = (len + 2 * padding - w) / stride + 1;
    let mut out = Vec::new();
    for bi in 0..n {
        for oc in 0..o {
            for t in 0..out_len {
                let mut acc = b.data()[oc];
                for ic in 0..c {
                    for j in 0..w {
                        let pos = (t * stride + j) as isize - padding as isize;
                        if pos >= 0 && (pos as usize) < len {
                            acc += k.data()[(oc * c + ic) * w + j]
                                * x.data()[(bi * c + ic) * len + pos as usize];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

#[test]
fn linear_gradient_check() {
    let layer = Linear::new(3, 2, Init::XavierUniform, &mut stream_rng(0, Stream::Init));
    let x = Tensor::new(
        vec![4, 3],
        (0..12).map(|i| (i as f64 * 0.37).sin()).collect(),
    )
    .unwrap();
    let err = grad_check(
        |g, xv| {
            let vars = layer.bind(g, true)?;
            let y = layer.forward(g, &vars, xv)?;
            let y = g.tanh(y);
            Ok(g.sum(y))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

proptest! {
    #[test]
    fn conv_matches_naive_oracle(
        n in 1usize..4, c in 1usize..5, len in 1usize..9, o in 1usize..5,
        w in 1usize..5, stride in 1usize..4, padding in 0usize..3, seed in any::<u64>(),
    ) {
        prop_assume!(len + 2 * padding >= w);
        let mut rng = stream_rng(seed, Stream::Init);
        let mut layer = Conv1d::new(c, o, w, stride, padding, Init::KaimingUniform, &mut rng).unwrap();
        layer.bias = dhag_core::nn::init_params(vec![o, 1], Init::XavierUniform, &mut rng).reshape(vec![o]).unwrap();
        let x = dhag_core::nn::init_params(vec![n * c * len, 1], Init::XavierUniform, &mut rng)
            .reshape(vec![n, c, len]).unwrap();
        let mut g = Graph::new();
        let vars = layer.bind(&mut g, false).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let y = layer.forward(&mut g, &vars, xv).unwrap();
        prop_assert_eq!(g.value(y).data(), &naive_conv(&x, &layer.kernels, &layer.bias, stride, padding)[..]);
    }

    #[test]
    fn adam_with_zero_lr_is_inert(grads in prop::collection::vec(-100.0f64..100.0, 6), steps in 1usize..5) {
        let mut p = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1e-3]).unwrap().with_requires_grad(true);
        let orig = p.clone();
        let mut adam = Adam::new(0.0);
        for _ in 0..steps {
            p.accumulate_grad(&grads).unwrap();
            adam.step(&mut [&mut p]).unwrap();
        }
        prop_assert_eq!(p.data(), orig.data());
        prop_assert_eq!(adam.steps(), steps as u64);
    }
}
