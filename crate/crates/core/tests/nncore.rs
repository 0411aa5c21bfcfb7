use bout_core::nncore::{
    batch_nll, conv_naive, read_checkpoint, write_checkpoint, Checkpoint, Layer, LayerSpec, Mode, Network, Tensor,
};
use bout_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn small_net(rng: &mut ChaCha8Rng) -> Network<f64> {
    let specs = [
        (
            "conv1",
            LayerSpec::Conv {
                in_channels: 2,
                out_channels: 3,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
        ),
        ("relu1", LayerSpec::Relu),
        (
            "pool1",
            LayerSpec::MaxPool {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
        ),
        (
            "conv2",
            LayerSpec::Conv {
                in_channels: 3,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
        ),
        ("relu2", LayerSpec::Relu),
        (
            "fc1",
            LayerSpec::Linear {
                in_features: 4 * 3 * 3,
                out_features: 5,
            },
        ),
        ("drop1", LayerSpec::Dropout { rate: 0.3 }),
        (
            "fc2",
            LayerSpec::Linear {
                in_features: 5,
                out_features: 3,
            },
        ),
        ("out", LayerSpec::LogSoftmax),
    ];
    let mut net = Network::new(&[2, 11, 11], &specs, rng).unwrap();
    // non-zero biases so relu inputs are not clustered at the kink
    for layer in net.layers_mut() {
        if layer.has_params() {
            let b = random_tensor(layer.bias.shape(), rng).map(|v| 0.1 * v);
            let w = layer.weight.clone();
            layer.set_params(w, b).unwrap();
        }
    }
    net
}

/// Loss with a fixed dropout mask (same rng seed every call).
fn loss(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (out, _, _) = net.forward_train(x, &mut rng).unwrap();
    batch_nll(&out, labels).unwrap().0
}

fn rel_err(a: f64, n: f64) -> f64 {
    if a.abs() < 1e-7 && n.abs() < 1e-7 {
        (a - n).abs()
    } else {
        (a - n).abs() / a.abs().max(n.abs())
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = small_net(&mut rng);
    let x = random_tensor(&[3, 2, 11, 11], &mut rng);
    let labels = [0, 2, 1];

    let mut drng = ChaCha8Rng::seed_from_u64(99);
    let (out, caches, bad) = net.forward_train(&x, &mut drng).unwrap();
    assert!(bad.is_none());
    let (_, g) = batch_nll(&out, &labels).unwrap();
    let grads = net.backward(&caches, &g).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for li in 0..net.layers().len() {
        let Some(pg) = grads.0[li].clone() else { continue };
        for which in 0..2 {
            let n = if which == 0 { pg.weight.len() } else { pg.bias.len() };
            for idx in (0..n).step_by(1 + n / 25) {
                let orig = net.layers()[li].clone();
                let perturb = |net: &mut Network<f64>, delta: f64| {
                    let (mut w, mut b) = (orig.weight.clone(), orig.bias.clone());
                    if which == 0 {
                        w.data_mut()[idx] += delta;
                    } else {
                        b.data_mut()[idx] += delta;
                    }
                    net.layers_mut()[li].set_params(w, b).unwrap();
                };
                perturb(&mut net, h);
                let up = loss(&net, &x, &labels);
                perturb(&mut net, -h);
                let down = loss(&net, &x, &labels);
                perturb(&mut net, 0.0);
                let numeric = (up - down) / (2.0 * h);
                let analytic = if which == 0 { pg.weight.data()[idx] } else { pg.bias.data()[idx] };
                worst = worst.max(rel_err(analytic, numeric));
                checked += 1;
            }
        }
    }
    assert!(checked > 50);
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn input_gradients_match_finite_differences_per_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let specs = [
        LayerSpec::Conv {
            in_channels: 2,
            out_channels: 3,
            kernel: 5,
            stride: 2,
            padding: 2,
        },
        LayerSpec::MaxPool {
            kernel: 3,
            stride: 2,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Linear {
            in_features: 2 * 7 * 7,
            out_features: 4,
        },
    ];
    for spec in specs {
        let mut layer = Layer::<f64>::new(spec.clone()).unwrap();
        if let Some((ws, bs)) = spec.param_shapes() {
            layer.set_params(random_tensor(&ws, &mut rng), random_tensor(&bs, &mut rng)).unwrap();
        }
        let x = random_tensor(&[2, 2, 7, 7], &mut rng);
        let (y, cache) = layer.forward(&x, Mode::Train, &mut rng).unwrap();
        // loss = sum(y * r) for a fixed random r
        let r = random_tensor(y.shape(), &mut rng);
        let (gi, _) = layer.backward(0, &cache, &r, true).unwrap();
        let gi = gi.unwrap();
        let h = 1e-6;
        for idx in (0..x.len()).step_by(3) {
            let mut f = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[idx] += delta;
                let (yp, _) = layer.forward(&xp, Mode::Eval, &mut rng).unwrap();
                yp.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let numeric = (f(h) - f(-h)) / (2.0 * h);
            let e = rel_err(gi.data()[idx], numeric);
            assert!(e < 1e-5, "{} input grad at {idx}: {} vs {numeric}", spec.kind(), gi.data()[idx]);
        }
    }
}

#[test]
fn log_softmax_gradient_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layer = Layer::<f64>::new(LayerSpec::LogSoftmax).unwrap();
    let x = random_tensor(&[4, 6], &mut rng).map(|v| v * 20.0);
    let (y, cache) = layer.forward(&x, Mode::Eval, &mut rng).unwrap();
    for b in 0..4 {
        let total: f64 = y.item(b).iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    let r = random_tensor(&[4, 6], &mut rng);
    let gi = layer.backward(0, &cache, &r, true).unwrap().0.unwrap();
    for idx in 0..x.len() {
        let mut f = |d: f64| {
            let mut xp = x.clone();
            xp.data_mut()[idx] += d;
            let (yp, _) = layer.forward(&xp, Mode::Eval, &mut rng).unwrap();
            yp.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let numeric = (f(1e-6) - f(-1e-6)) / 2e-6;
        assert!(rel_err(gi.data()[idx], numeric) < 1e-6);
    }
}

#[test]
fn cache_is_stale_after_parameter_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = small_net(&mut rng);
    let x = random_tensor(&[1, 2, 11, 11], &mut rng);
    let (out, caches, _) = net.forward_train(&x, &mut rng).unwrap();
    let (_, g) = batch_nll(&out, &[1]).unwrap();
    net.layers_mut()[3].touch();
    match net.backward(&caches, &g) {
        Err(Error::StaleCache { layer, .. }) => assert_eq!(layer, 3),
        other => panic!("expected a stale cache error, got {other:?}"),
    }

    // caches from another network are rejected too
    let other = small_net(&mut rng);
    let (out2, caches2, _) = other.forward_train(&x, &mut rng).unwrap();
    let (_, g2) = batch_nll(&out2, &[1]).unwrap();
    assert!(matches!(net.backward(&caches2, &g2), Err(Error::StaleCache { .. })));
}

#[test]
fn shape_mismatch_is_reported_at_construction() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let specs = [
        (
            "conv",
            LayerSpec::Conv {
                in_channels: 3,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 0,
            },
        ),
        (
            "fc",
            LayerSpec::Linear {
                in_features: 10,
                out_features: 2,
            },
        ),
    ];
    assert!(matches!(
        Network::<f32>::new(&[3, 8, 8], &specs, &mut rng),
        Err(Error::Shape { .. })
    ));
    assert!(matches!(
        Network::<f32>::new(&[2, 8, 8], &specs[..1], &mut rng),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn label_out_of_range() {
    let t = Tensor::from_vec(&[1, 2], vec![-0.5f32, -1.0]).unwrap();
    assert!(matches!(batch_nll(&t, &[2]), Err(Error::LabelOutOfRange { label: 2, classes: 2 })));
}

#[test]
fn dropout_is_identity_in_eval_and_rescales_in_train() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layer = Layer::<f64>::new(LayerSpec::Dropout { rate: 0.5 }).unwrap();
    let x = Tensor::filled(&[1, 10_000], 1.0);
    let (e, _) = layer.forward(&x, Mode::Eval, &mut rng).unwrap();
    assert_eq!(e, x);
    let (t, _) = layer.forward(&x, Mode::Train, &mut rng).unwrap();
    assert!(t.data().iter().all(|&v| v == 0.0 || v == 2.0));
    let mean = t.sum() / 10_000.0;
    assert!((mean - 1.0).abs() < 0.05, "{mean}");
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net: Network<f32> = Network::new(
        &[4],
        &[(
            "fc",
            LayerSpec::Linear {
                in_features: 4,
                out_features: 3,
            },
        )],
        &mut rng,
    )
    .unwrap();
    let ckpt = Checkpoint {
        tensors: net.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        meta: serde_json::json!({"epoch": 3, "preset": "desk"}),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    write_checkpoint(&path, &ckpt).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);

    let mut restored: Network<f32> = Network::new(
        &[4],
        &[(
            "fc",
            LayerSpec::Linear {
                in_features: 4,
                out_features: 3,
            },
        )],
        &mut rng,
    )
    .unwrap();
    restored.load_params(&back.tensors).unwrap();
    assert_eq!(restored.layers()[0].weight, net.layers()[0].weight);

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x55;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_checkpoint(&path), Err(Error::Checksum { chunk: 2 })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn im2col_convolution_matches_direct_loop_exactly(
        c in 1usize..4, o in 1usize..4, k in 1usize..6, s in 1usize..4,
        h in 1usize..14, w in 1usize..14, seed in any::<u64>(),
    ) {
        let p = k / 2;
        prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = LayerSpec::Conv { in_channels: c, out_channels: o, kernel: k, stride: s, padding: p };
        let mut layer = Layer::<f32>::new(spec).unwrap();
        let wt = Tensor::from_vec(&[o, c, k, k], (0..o * c * k * k).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let bt = Tensor::from_vec(&[o], (0..o).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        layer.set_params(wt.clone(), bt.clone()).unwrap();
        let x = Tensor::from_vec(&[2, c, h, w], (0..2 * c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let (y, _) = layer.forward(&x, Mode::Eval, &mut rng).unwrap();
        for b in 0..2 {
            let direct = conv_naive(x.item(b), wt.data(), bt.data(), (c, h, w), (o, k, s, p));
            prop_assert_eq!(y.item(b), direct.as_slice());
        }
    }

    #[test]
    fn maxpool_backward_conserves_gradient_mass(h in 2usize..12, w in 2usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = Layer::<f64>::new(LayerSpec::MaxPool { kernel: 3, stride: 2, padding: 1 }).unwrap();
        let x = random_tensor(&[1, 2, h, w], &mut rng);
        let (y, cache) = layer.forward(&x, Mode::Eval, &mut rng).unwrap();
        let g = random_tensor(y.shape(), &mut rng);
        let gi = layer.backward(0, &cache, &g, true).unwrap().0.unwrap();
        prop_assert!((gi.sum() - g.sum()).abs() < 1e-9);
    }
}
