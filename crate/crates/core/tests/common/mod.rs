#![allow(dead_code)]

use deepbeat::neuro::{Activation, Layer, LayerSpec, Mode, Padding, Tensor, Upstream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn batch_shape(batch: usize, item: &[usize]) -> Vec<usize> {
    let mut s = vec![batch];
    s.extend_from_slice(item);
    s
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Max relative error between backprop and central differences of the
/// scalar `sum(w * layer(x))` over the input and every trainable parameter.
pub fn check_layer(spec: LayerSpec, in_shape: &[usize], batch: usize, mode: Mode, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = Layer::<f64>::new("probe", spec.clone(), in_shape).expect("valid probe layer");
    for (pi, name) in layer.param_names().into_iter().enumerate() {
        let n = layer.params[pi].len();
        let vals: Vec<f64> = match name {
            "gamma" => (0..n).map(|_| rng.random_range(0.5..1.5)).collect(),
            "moving_var" => (0..n).map(|_| rng.random_range(0.5..1.5)).collect(),
            _ => normal_vec(&mut rng, n, 0.5),
        };
        layer.params[pi].data_mut().copy_from_slice(&vals);
    }
    let xs = batch_shape(batch, in_shape);
    let x = Tensor::new(xs.clone(), normal_vec(&mut rng, xs.iter().product(), 1.0)).unwrap();
    let ys = batch_shape(batch, layer.output_shape());
    let w = normal_vec(&mut rng, ys.iter().product(), 1.0);
    let fseed = rng.random::<u64>();

    let loss = |layer: &Layer<f64>, x: &Tensor<f64>| -> f64 {
        let (y, _) = layer.forward(x, mode, fseed).unwrap();
        y.data().iter().zip(&w).map(|(a, b)| a * b).sum()
    };

    let (_, cache) = layer.forward(&x, mode, fseed).unwrap();
    let up = Tensor::new(ys, w.clone()).unwrap();
    let (dx, grads) = layer.backward(&cache, Upstream::Output(up), true).unwrap();
    let dx = dx.expect("input gradient");

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        let num = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(dx.data()[i], num));
    }
    for (pi, g) in grads.iter().enumerate() {
        if !spec.is_trainable_param(pi) {
            assert!(g.is_none(), "non-trainable parameter {pi} received a gradient");
            continue;
        }
        let g = g.as_ref().expect("trainable parameter gradient");
        for i in 0..layer.params[pi].len() {
            let mut lp = layer.clone();
            lp.params[pi].data_mut()[i] += FD_STEP;
            let mut lm = layer.clone();
            lm.params[pi].data_mut()[i] -= FD_STEP;
            let num = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[i], num));
        }
    }
    worst
}

pub const KINDS: [&str; 13] = [
    "conv_same",
    "conv_valid",
    "conv_relu",
    "maxpool",
    "upsample",
    "dense",
    "dense_softmax",
    "flatten",
    "batchnorm_train",
    "batchnorm_infer",
    "dropout",
    "relu_leaky",
    "softmax",
];

/// A random small case of one layer kind drawn from `seed`:
/// `(spec, per-sample input shape, batch, mode)`.
pub fn random_case(kind: &str, seed: u64) -> (LayerSpec, Vec<usize>, usize, Mode) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let len = rng.random_range(4..=12);
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=4);
    let batch = rng.random_range(1..=3);
    let kernel = rng.random_range(1..=len.min(5));
    let stride = rng.random_range(1..=3);
    let seq = vec![len, cin];
    match kind {
        "conv_same" => (LayerSpec::conv(cout, kernel, stride, Padding::Same, Activation::Linear), seq, batch, Mode::Train),
        "conv_valid" => (LayerSpec::conv(cout, kernel, stride, Padding::Valid, Activation::Linear), seq, batch, Mode::Train),
        "conv_relu" => (LayerSpec::conv(cout, kernel, stride, Padding::Same, Activation::Relu), seq, batch, Mode::Train),
        "maxpool" => (LayerSpec::MaxPool1D { pool: rng.random_range(1..=3) }, seq, batch, Mode::Train),
        "upsample" => (LayerSpec::UpSample1D { factor: rng.random_range(1..=3) }, seq, batch, Mode::Train),
        "dense" => (LayerSpec::dense(cout + 1, Activation::Linear), vec![len], batch, Mode::Train),
        "dense_softmax" => (LayerSpec::dense(cout + 1, Activation::Softmax), vec![len], batch, Mode::Train),
        "flatten" => (LayerSpec::Flatten, seq, batch, Mode::Train),
        // Batch statistics need more than one value per channel.
        "batchnorm_train" => (LayerSpec::batch_norm(), seq, batch.max(2), Mode::Train),
        "batchnorm_infer" => (LayerSpec::batch_norm(), seq, batch, Mode::Infer),
        "dropout" => (LayerSpec::Dropout { rate: rng.random_range(0.0..0.6) }, seq, batch, Mode::Train),
        "relu_leaky" => {
            if rng.random::<bool>() {
                (LayerSpec::ReLU, seq, batch, Mode::Train)
            } else {
                (LayerSpec::LeakyReLU { slope: rng.random_range(0.0..0.3) }, seq, batch, Mode::Train)
            }
        }
        "softmax" => (LayerSpec::Softmax, vec![cout + 1], batch, Mode::Train),
        other => panic!("unknown layer kind {other}"),
    }
}
