//! Central finite-difference checks of every layer and both fine-tuning loss
//! paths, in double precision.

use hcp::hcp::{hypotheses_loss, hypotheses_step, image_loss, image_step};
use hcp::nn::{
    multinomial_logistic_loss, softmax, softmax_logistic_backward, softmax_squared_loss, squared_loss, LayerSpec,
    Mode, Network, WeightInit,
};
use hcp::{LabelVector, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{max_relative_error, numeric_gradient};

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;

type LossFn<'a> = &'a dyn Fn(&Tensor<f64>) -> (f64, Tensor<f64>);

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `<out, r>` for a fixed random projection `r`.
fn projection(rng: &mut ChaCha8Rng, shape: &[usize]) -> impl Fn(&Tensor<f64>) -> (f64, Tensor<f64>) {
    let r = random_tensor(rng, shape);
    move |out: &Tensor<f64>| {
        let v = out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        (v, r.clone())
    }
}

fn forward_loss(net: &Network<f64>, x: &Tensor<f64>, mode: Mode, seed: u64, loss: LossFn) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loss(&net.forward(x, mode, &mut rng).unwrap().0).0
}

fn param_values(net: &Network<f64>) -> Vec<f64> {
    net.params().flat_map(|p| p.value.data().to_vec()).collect()
}

fn set_param_values(net: &mut Network<f64>, values: &[f64]) {
    let mut it = values.iter();
    for p in net.params_mut() {
        for v in p.value.data_mut() {
            *v = *it.next().unwrap();
        }
    }
}

/// Worst relative error over the input gradient and every parameter gradient
/// of `loss(net(x))`. Train-mode dropout reuses the same mask for every
/// evaluation by reseeding.
pub fn check_network(mut net: Network<f64>, x: &Tensor<f64>, mode: Mode, loss: LossFn) -> f64 {
    let seed = 17;
    net.zero_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (out, trace) = net.forward(x, mode, &mut rng).unwrap();
    let dx = net.backward(&trace, &loss(&out).1).unwrap();
    let analytic: Vec<f64> = net.params().flat_map(|p| p.grad.data().to_vec()).collect();

    let num_dx = numeric_gradient(x.data(), STEP, |v| {
        let xi = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
        forward_loss(&net, &xi, mode, seed, loss)
    });
    let theta = param_values(&net);
    let mut probe = net.clone();
    let num_params = numeric_gradient(&theta, STEP, |v| {
        set_param_values(&mut probe, v);
        forward_loss(&probe, x, mode, seed, loss)
    });
    max_relative_error(dx.data(), &num_dx, FLOOR).max(max_relative_error(&analytic, &num_params, FLOOR))
}

fn build(input: &[usize], specs: Vec<LayerSpec>, seed: u64) -> Network<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Network::new(input, specs, WeightInit::Gaussian(0.5), &mut rng).unwrap()
}

fn conv(out_channels: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_channels,
        kernel: 3,
        stride,
        pad,
        lr_group: 0,
    }
}

fn fc(out_units: usize) -> LayerSpec {
    LayerSpec::Fc { out_units, lr_group: 1 }
}

fn single_layer(name: &str, input: &[usize], specs: Vec<LayerSpec>, mode: Mode, seed: u64) -> (String, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = build(input, specs, seed);
    let x = random_tensor(&mut rng, input);
    let out_shape = net.output_shape();
    let loss = projection(&mut rng, &out_shape);
    (name.to_string(), check_network(net, &x, mode, &loss))
}

/// The small CNN used for the loss-path checks: every layer type appears.
pub fn tiny_cnn(seed: u64, classes: usize) -> Network<f64> {
    build(
        &[3, 8, 8],
        vec![
            conv(3, 1, 1),
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            fc(6),
            LayerSpec::Relu,
            LayerSpec::Dropout { ratio: 0.5 },
            fc(classes),
        ],
        seed,
    )
}

/// Smallest gap, over classes, between the winning hypothesis logit and the
/// runner-up.
fn argmax_margin(net: &Network<f64>, xs: &[Tensor<f64>]) -> f64 {
    let logits: Vec<Tensor<f64>> = xs.iter().map(|x| net.forward_eval(x).unwrap()).collect();
    let classes = logits[0].len();
    (0..classes)
        .map(|c| {
            let mut v: Vec<f64> = logits.iter().map(|l| l.data()[c]).collect();
            v.sort_by(|a, b| b.total_cmp(a));
            v[0] - v[1]
        })
        .fold(f64::INFINITY, f64::min)
}

fn ift_path(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = tiny_cnn(seed, 5);
    let x = random_tensor(&mut rng, &[3, 8, 8]);
    let y = LabelVector::new(vec![1, 0, 1, 0, 0]).unwrap();
    net.zero_grad();
    image_step(&mut net, &x, &y, Mode::Eval, &mut rng).unwrap();
    let analytic: Vec<f64> = net.params().flat_map(|p| p.grad.data().to_vec()).collect();
    let theta = param_values(&net);
    let mut probe = net.clone();
    let numeric = numeric_gradient(&theta, STEP, |v| {
        set_param_values(&mut probe, v);
        image_loss(&probe, &x, &y).unwrap()
    });
    max_relative_error(&analytic, &numeric, FLOOR)
}

/// H-FT path at a point where every class has a unique winning hypothesis
/// with a margin far above the finite-difference step.
fn hft_path(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = LabelVector::new(vec![0, 1, 1, 0, 1]).unwrap();
    let (mut net, xs) = loop {
        let net = tiny_cnn(rng.random(), 5);
        let xs: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&mut rng, &[3, 8, 8])).collect();
        if argmax_margin(&net, &xs) > 1e-3 {
            break (net, xs);
        }
    };
    net.zero_grad();
    hypotheses_step(&mut net, &xs, &y, Mode::Eval, &mut rng).unwrap();
    let analytic: Vec<f64> = net.params().flat_map(|p| p.grad.data().to_vec()).collect();
    let theta = param_values(&net);
    let mut probe = net.clone();
    let numeric = numeric_gradient(&theta, STEP, |v| {
        set_param_values(&mut probe, v);
        hypotheses_loss(&probe, &xs, &y).unwrap()
    });
    max_relative_error(&analytic, &numeric, FLOOR)
}

fn loss_checks(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = random_tensor(&mut rng, &[6]);
    let logistic = {
        let p = softmax(&z);
        let g = softmax_logistic_backward(&p, 2).unwrap();
        let n = numeric_gradient(z.data(), STEP, |v| {
            multinomial_logistic_loss(&softmax(&Tensor::from_slice(v)), 2).unwrap()
        });
        max_relative_error(g.data(), &n, FLOOR)
    };
    let y = LabelVector::new(vec![1, 0, 0, 1, 1, 0]).unwrap();
    let squared = {
        let (_, g) = softmax_squared_loss(&z, &y).unwrap();
        let n = numeric_gradient(z.data(), STEP, |v| {
            squared_loss(&softmax(&Tensor::from_slice(v)), &y).unwrap()
        });
        max_relative_error(g.data(), &n, FLOOR)
    };
    vec![
        ("softmax + logistic loss".to_string(), logistic),
        ("softmax + squared loss".to_string(), squared),
    ]
}

/// Every check with its worst relative error.
pub fn gradient_suite() -> Vec<(String, f64)> {
    let mut out = vec![
        single_layer("conv pad 1", &[2, 6, 6], vec![conv(3, 1, 1)], Mode::Train, 1),
        single_layer("conv stride 2", &[2, 7, 7], vec![conv(2, 2, 0)], Mode::Train, 2),
        single_layer("relu", &[12], vec![fc(12), LayerSpec::Relu], Mode::Train, 3),
        single_layer("maxpool", &[2, 6, 6], vec![LayerSpec::MaxPool { kernel: 2, stride: 2 }], Mode::Train, 4),
        single_layer("fully connected", &[3, 2, 2], vec![fc(5)], Mode::Train, 5),
        single_layer("dropout (train)", &[10], vec![LayerSpec::Dropout { ratio: 0.5 }], Mode::Train, 6),
        single_layer("dropout (eval)", &[10], vec![LayerSpec::Dropout { ratio: 0.5 }], Mode::Eval, 7),
        single_layer("softmax", &[7], vec![LayerSpec::Softmax], Mode::Train, 8),
    ];
    {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = tiny_cnn(9, 4);
        let x = random_tensor(&mut rng, &[3, 8, 8]);
        let loss = projection(&mut rng, &[4]);
        out.push(("full stack (train mode)".to_string(), check_network(net, &x, Mode::Train, &loss)));
    }
    out.extend(loss_checks(10));
    for seed in 0..3 {
        out.push((format!("image fine-tuning loss path #{seed}"), ift_path(100 + seed)));
        out.push((format!("hypothesis fine-tuning loss path #{seed}"), hft_path(200 + seed)));
    }
    out
}
