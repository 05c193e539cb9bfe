use super::*;
use crate::error::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn single(spec: LayerSpec, input: &[usize]) -> Layer<f64> {
    Layer::new("l", spec, input).unwrap()
}

#[test]
fn conv_param_counts_and_lengths() {
    let spec = LayerSpec::conv(64, 10, 1, Padding::Same, Activation::Relu);
    assert_eq!(spec.param_count(&[800, 1]), 704);
    assert_eq!(spec.output_shape(&[800, 1]).unwrap(), vec![800, 64]);
    let spec = LayerSpec::conv(64, 4, 3, Padding::Same, Activation::Linear);
    assert_eq!(spec.output_shape(&[44, 50]).unwrap(), vec![15, 64]);
    assert_eq!(spec.param_count(&[44, 50]), 12_864);
    let spec = LayerSpec::conv(25, 2, 2, Padding::Valid, Activation::Linear);
    assert_eq!(spec.output_shape(&[2, 35]).unwrap(), vec![1, 25]);
    let spec = LayerSpec::conv(0, 2, 2, Padding::Valid, Activation::Linear);
    assert!(matches!(spec.output_shape(&[4, 1]), Err(Error::Config(_))));
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut layer = single(LayerSpec::conv(1, 1, 1, Padding::Same, Activation::Linear), &[5, 1]);
    layer.params[0].data_mut()[0] = 1.0;
    let x = t64(&[1, 5, 1], &[1.0, -2.0, 3.0, 0.5, 4.0]);
    let (y, _) = layer.forward(&x, Mode::Infer, 0).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_rejects_wrong_input_shape() {
    let layer = single(LayerSpec::conv(2, 3, 1, Padding::Same, Activation::Linear), &[8, 2]);
    let x = Tensor::<f64>::zeros(vec![1, 8, 3]);
    assert!(matches!(layer.forward(&x, Mode::Infer, 0), Err(Error::Shape(_))));
}

#[test]
fn same_padding_matches_hand_convolution() {
    // k = 3, stride 2, L = 5 -> out 3, total pad 2, one on each side.
    let mut layer = single(LayerSpec::conv(1, 3, 2, Padding::Same, Activation::Linear), &[5, 1]);
    layer.params[0].data_mut().copy_from_slice(&[1.0, 10.0, 100.0]);
    layer.params[1].data_mut()[0] = 0.5;
    let x = t64(&[1, 5, 1], &[1.0, 2.0, 3.0, 4.0, 5.0]);
    let (y, _) = layer.forward(&x, Mode::Infer, 0).unwrap();
    let expect = [10.0 + 200.0 + 0.5, 2.0 + 30.0 + 400.0 + 0.5, 4.0 + 50.0 + 0.5];
    assert_eq!(y.data(), &expect);
}

#[test]
fn pooling_examples() {
    let pool = single(LayerSpec::MaxPool1D { pool: 2 }, &[6, 1]);
    let x = t64(&[1, 6, 1], &[1.0, 3.0, 2.0, 5.0, 4.0, 6.0]);
    assert_eq!(pool.forward(&x, Mode::Infer, 0).unwrap().0.data(), &[3.0, 5.0, 6.0]);

    let up = single(LayerSpec::UpSample1D { factor: 2 }, &[2, 1]);
    let x = t64(&[1, 2, 1], &[1.0, 2.0]);
    assert_eq!(up.forward(&x, Mode::Infer, 0).unwrap().0.data(), &[1.0, 1.0, 2.0, 2.0]);

    let spec = LayerSpec::MaxPool1D { pool: 3 };
    assert_eq!(spec.output_shape(&[800, 64]).unwrap(), vec![266, 64]);
}

#[test]
fn dense_counts_and_identity() {
    assert_eq!(LayerSpec::dense(800, Activation::Linear).param_count(&[50_688]), 40_551_200);
    assert_eq!(LayerSpec::dense(175, Activation::Relu).param_count(&[35]), 6_300);
    let mut layer = single(LayerSpec::dense(3, Activation::Linear), &[3]);
    for i in 0..3 {
        layer.params[0].data_mut()[i * 3 + i] = 1.0;
    }
    let x = t64(&[2, 3], &[1.0, -2.0, 3.0, 0.0, 5.0, 0.25]);
    assert_eq!(layer.forward(&x, Mode::Infer, 0).unwrap().0, x);
    let bad = Tensor::<f64>::zeros(vec![2, 4]);
    assert!(matches!(layer.forward(&bad, Mode::Infer, 0), Err(Error::Shape(_))));
}

#[test]
fn batch_norm_examples() {
    let spec = LayerSpec::batch_norm();
    assert_eq!(spec.param_count(&[44, 50]), 200);

    let mut layer = single(spec.clone(), &[4, 2]);
    layer.params[1].data_mut().fill(0.5);
    let x = Tensor::filled(vec![3, 4, 2], 7.0);
    let (y, _) = layer.forward(&x, Mode::Train, 0).unwrap();
    assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));

    let mut layer = single(spec, &[50, 2]);
    layer.params[0].data_mut().copy_from_slice(&[2.0, 0.5]);
    layer.params[1].data_mut().copy_from_slice(&[-1.0, 3.0]);
    let data: Vec<f64> = (0..4 * 50 * 2).map(|i| ((i * 37 % 101) as f64).sin() * 3.0 + 1.0).collect();
    let x = t64(&[4, 50, 2], &data);
    let (y, cache) = layer.forward(&x, Mode::Train, 0).unwrap();
    for ch in 0..2 {
        let vals: Vec<f64> = y.data().iter().skip(ch).step_by(2).cloned().collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((mean - layer.params[1].data()[ch]).abs() < 1e-5);
        assert!((std - layer.params[0].data()[ch]).abs() < 1e-5);
    }
    let before = layer.params[2].clone();
    layer.update_running_stats(&cache);
    assert_ne!(before, layer.params[2]);
}

#[test]
fn activation_examples() {
    let x = t64(&[1, 2], &[-1.0, 2.0]);
    let relu = single(LayerSpec::ReLU, &[2]);
    assert_eq!(relu.forward(&x, Mode::Infer, 0).unwrap().0.data(), &[0.0, 2.0]);
    let leaky = single(LayerSpec::LeakyReLU { slope: 0.1 }, &[2]);
    assert_eq!(leaky.forward(&x, Mode::Infer, 0).unwrap().0.data(), &[-0.1, 2.0]);
    let soft = single(LayerSpec::Softmax, &[3, 4]);
    let x = t64(&[2, 3, 4], &(0..24).map(|i| (i as f64 * 0.7).cos() * 5.0).collect::<Vec<_>>());
    let y = soft.forward(&x, Mode::Infer, 0).unwrap().0;
    for row in y.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn dropout_behaviour() {
    let x = Tensor::<f64>::filled(vec![1, 100_000], 1.0);
    let zero = single(LayerSpec::Dropout { rate: 0.0 }, &[100_000]);
    assert_eq!(zero.forward(&x, Mode::Train, 3).unwrap().0, x);
    let half = single(LayerSpec::Dropout { rate: 0.5 }, &[100_000]);
    assert_eq!(half.forward(&x, Mode::Infer, 3).unwrap().0, x);
    let y = half.forward(&x, Mode::Train, 3).unwrap().0;
    let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
    let mean = y.data().iter().sum::<f64>() / 1e5;
    assert!((kept - 0.5).abs() < 0.01, "{kept}");
    assert!((mean - 1.0).abs() < 0.02, "{mean}");
    assert!(matches!(LayerSpec::Dropout { rate: 1.0 }.validate(), Err(Error::Config(_))));
}

#[test]
fn loss_examples() {
    let a = t64(&[1, 2], &[0.0, 0.0]);
    let b = t64(&[1, 2], &[1.0, 1.0]);
    assert_eq!(mse_loss(&a, &b).unwrap().0, 1.0);
    assert_eq!(mse_loss(&b, &b).unwrap().0, 0.0);
    let onehot = t64(&[1, 2], &[1.0, 0.0]);
    assert!(cross_entropy(&onehot, &onehot).unwrap().abs() < 1e-9);
    let p = t64(&[1, 2], &[0.5, 0.5]);
    assert!((cross_entropy(&p, &onehot).unwrap() - 2f64.ln()).abs() < 1e-12);
    let bad = t64(&[1, 3], &[0.2, 0.3, 0.5]);
    assert!(matches!(mse_loss(&bad, &a), Err(Error::Shape(_))));
    assert!(matches!(cross_entropy(&bad, &a), Err(Error::Shape(_))));
}

fn scalar_net(value: f64) -> Sequential<f64> {
    let mut net = Sequential::new(&[1], vec![("w".into(), LayerSpec::dense(1, Activation::Linear))]).unwrap();
    net.layers[0].params[0].data_mut()[0] = value;
    net
}

#[test]
fn adam_first_step_and_zero_gradient() {
    let mut p = [0.0f64];
    let (mut m, mut v) = ([0.0], [0.0]);
    let cfg = AdamConfig::default();
    adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &cfg);
    assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-8);

    let mut net = scalar_net(0.7);
    let mut state = AdamState::new(&net, cfg);
    let zero = vec![vec![Some(t64(&[1, 1], &[0.0])), Some(t64(&[1], &[0.0]))]];
    for _ in 0..10 {
        state.step(&mut net, &zero).unwrap();
    }
    assert_eq!(net.layers[0].params[0].data()[0], 0.7);
}

#[test]
fn adam_trajectories_are_reproducible() {
    let run = || {
        let mut net = scalar_net(2.0);
        let mut state = AdamState::new(&net, AdamConfig { lr: 0.05, ..Default::default() });
        let x = t64(&[1, 1], &[1.0]);
        let target = t64(&[1, 1], &[-1.0]);
        let mut traj = Vec::new();
        for step in 0..50 {
            let (y, tape) = net.forward(&x, Mode::Train, step).unwrap();
            let (_, g) = mse_loss(&y, &target).unwrap();
            let (_, grads) = net.backward(&tape, Upstream::Output(g), false).unwrap();
            state.step(&mut net, &grads).unwrap();
            traj.push(net.layers[0].params[0].data()[0].to_bits());
        }
        traj
    };
    assert_eq!(run(), run());
}

#[test]
fn quadratic_optimum_has_zero_gradient() {
    let net = scalar_net(3.0);
    let x = t64(&[1, 1], &[1.0]);
    let target = t64(&[1, 1], &[3.0]);
    let (y, tape) = net.forward(&x, Mode::Train, 0).unwrap();
    let (loss, g) = mse_loss(&y, &target).unwrap();
    assert_eq!(loss, 0.0);
    let (_, grads) = net.backward(&tape, Upstream::Output(g), false).unwrap();
    assert!(grads[0][0].as_ref().unwrap().data()[0].abs() < 1e-10);
}

#[test]
fn frozen_layers_get_no_gradient() {
    let mut net = Sequential::<f64>::new(
        &[4],
        vec![
            ("a".into(), LayerSpec::dense(3, Activation::Relu)),
            ("b".into(), LayerSpec::dense(2, Activation::Linear)),
        ],
    )
    .unwrap();
    net.init_he(5);
    net.set_frozen(0..1, true);
    let x = t64(&[1, 4], &[0.1, 0.2, 0.3, 0.4]);
    let (y, tape) = net.forward(&x, Mode::Train, 0).unwrap();
    let (_, grads) = net.backward(&tape, Upstream::Output(y), false).unwrap();
    assert!(grads[0].iter().all(Option::is_none));
    assert!(grads[1].iter().all(Option::is_some));
}

#[test]
fn non_finite_gradient_names_the_layer() {
    let mut net = scalar_net(1.0);
    net.layers[0].name = "head".into();
    let x = t64(&[1, 1], &[1.0]);
    let (_, tape) = net.forward(&x, Mode::Train, 0).unwrap();
    let err = net
        .backward(&tape, Upstream::Output(t64(&[1, 1], &[f64::NAN])), true)
        .unwrap_err();
    assert!(matches!(err, Error::Numeric { ref layer, .. } if layer == "head"));
}

#[test]
fn he_init_statistics() {
    let t: Tensor<f64> = he_init(&[100_000], 2, 42);
    let mean = t.data().iter().sum::<f64>() / 1e5;
    let std = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1e5).sqrt();
    assert!((std - 1.0).abs() < 0.02, "{std}");
    let again: Tensor<f64> = he_init(&[100_000], 2, 42);
    assert_eq!(t, again);

    let mut net = Sequential::<f32>::new(&[8, 1], vec![("c".into(), LayerSpec::conv(4, 3, 1, Padding::Same, Activation::Relu))]).unwrap();
    net.layers[0].params[1].data_mut().fill(9.0);
    net.init_he(1);
    assert!(net.layers[0].params[1].data().iter().all(|&b| b == 0.0));
}
