mod common;

use common::{check_layer, random_case, rel_err, FD_STEP, KINDS};
use deepbeat::neuro::{softmax_ce_loss, Activation, LayerSpec, Mode, Padding, Sequential, Tensor, Upstream};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_layer_kind_matches_finite_differences(kind in 0..KINDS.len(), seed in any::<u64>()) {
        let (spec, shape, batch, mode) = random_case(KINDS[kind], seed);
        let err = check_layer(spec.clone(), &shape, batch, mode, seed);
        prop_assert!(err < TOL, "{} {:?} on {:?}: rel err {}", KINDS[kind], spec, shape, err);
    }
}

#[test]
fn each_kind_passes_twenty_fixed_seeds() {
    for kind in KINDS {
        for seed in 0..20 {
            let (spec, shape, batch, mode) = random_case(kind, seed);
            let err = check_layer(spec, &shape, batch, mode, seed);
            assert!(err < TOL, "{kind} seed {seed}: {err}");
        }
    }
}

/// Softmax cross-entropy handed to the last layer as `p - t` must equal the
/// finite-difference gradient of the loss through the whole stack.
#[test]
fn stacked_network_with_cross_entropy_matches_finite_differences() {
    let specs = vec![
        ("c1".to_string(), LayerSpec::conv(3, 3, 2, Padding::Same, Activation::Linear)),
        ("lr".to_string(), LayerSpec::LeakyReLU { slope: 0.01 }),
        ("bn".to_string(), LayerSpec::batch_norm()),
        ("c2".to_string(), LayerSpec::conv(2, 2, 1, Padding::Valid, Activation::Relu)),
        ("fl".to_string(), LayerSpec::Flatten),
        ("d1".to_string(), LayerSpec::dense(5, Activation::Relu)),
        ("out".to_string(), LayerSpec::dense(3, Activation::Softmax)),
    ];
    let mut net = Sequential::<f64>::new(&[10, 2], specs).unwrap();
    net.init_he(11);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(vec![4, 10, 2], common::normal_vec(&mut rng, 80, 1.0)).unwrap();
    let mut t = vec![0.0; 12];
    for (b, c) in [0usize, 2, 1, 2].iter().enumerate() {
        t[b * 3 + c] = 1.0;
    }
    let target = Tensor::new(vec![4, 3], t).unwrap();

    let loss = |net: &Sequential<f64>| {
        let (p, _) = net.forward(&x, Mode::Train, 9).unwrap();
        softmax_ce_loss(&p, &target).unwrap().0
    };
    let (p, tape) = net.forward(&x, Mode::Train, 9).unwrap();
    let (_, g) = softmax_ce_loss(&p, &target).unwrap();
    let (_, grads) = net.backward(&tape, Upstream::PreActivation(g), false).unwrap();

    let mut worst: f64 = 0.0;
    for li in 0..net.layers.len() {
        for pi in 0..net.layers[li].params.len() {
            let Some(gt) = &grads[li][pi] else { continue };
            for i in 0..gt.len() {
                let mut np = net.clone();
                np.layers[li].params[pi].data_mut()[i] += FD_STEP;
                let mut nm = net.clone();
                nm.layers[li].params[pi].data_mut()[i] -= FD_STEP;
                let num = (loss(&np) - loss(&nm)) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(gt.data()[i], num));
            }
        }
    }
    assert!(worst < TOL, "max rel err {worst}");
}
