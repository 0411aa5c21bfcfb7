use bout_core::explain::{
    dtd_relevance, dtd_trace, guided_backprop, read_relevance, saliency, score_gradient, Method, RelevanceRecord,
    RelevanceWriter,
};
use bout_core::nncore::{LayerSpec, Network, Real, Tensor};
use bout_core::twostream::{Stream, StreamConfig};
use bout_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear_net(weights: Vec<f64>, inputs: usize) -> Network<f64> {
    let outputs = weights.len() / inputs;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = Network::new(
        &[inputs],
        &[(
            "fc",
            LayerSpec::Linear {
                in_features: inputs,
                out_features: outputs,
            },
        )],
        &mut rng,
    )
    .unwrap();
    net.layers_mut()[0]
        .set_params(Tensor::from_vec(&[outputs, inputs], weights).unwrap(), Tensor::zeros(&[outputs]))
        .unwrap();
    net
}

fn randomize<T: Real>(net: &mut Network<T>, rng: &mut ChaCha8Rng, bias_scale: f64) {
    for layer in net.layers_mut() {
        if layer.has_params() {
            let values = (0..layer.bias.len())
                .map(|_| T::from_f64(rng.gen_range(-bias_scale..=bias_scale)).unwrap())
                .collect();
            let b = Tensor::from_vec(layer.bias.shape(), values).unwrap();
            let w = layer.weight.clone();
            layer.set_params(w, b).unwrap();
        }
    }
}

fn small_conv_net(rng: &mut ChaCha8Rng) -> Network<f64> {
    let specs = [
        (
            "conv1",
            LayerSpec::Conv {
                in_channels: 3,
                out_channels: 6,
                kernel: 5,
                stride: 2,
                padding: 2,
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
                in_channels: 6,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
        ),
        ("relu2", LayerSpec::Relu),
        (
            "fc1",
            LayerSpec::Linear {
                in_features: 8 * 4 * 4,
                out_features: 10,
            },
        ),
        ("relu3", LayerSpec::Relu),
        ("drop", LayerSpec::Dropout { rate: 0.5 }),
        (
            "fc2",
            LayerSpec::Linear {
                in_features: 10,
                out_features: 2,
            },
        ),
        ("out", LayerSpec::LogSoftmax),
    ];
    Network::new(&[3, 15, 15], &specs, rng).unwrap()
}

fn random_input(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

#[test]
fn zplus_rule_hand_example() {
    let net = linear_net(vec![2.0, 1.0], 2);
    let x = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
    let map = dtd_relevance(&net, &x, 0, &[(0.0, 1.0), (0.0, 1.0)]).unwrap();
    // score 3 is the relevance entering; normalize to unit output relevance
    assert_eq!(map.decomposed_output, 3.0);
    let r: Vec<f64> = map.values.data().iter().map(|v| v / 3.0).collect();
    assert!((r[0] - 2.0 / 3.0).abs() < 1e-15 && (r[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn all_negative_weights_distribute_nothing() {
    // two-layer net: hidden unit 0 feeds the output through negative weights
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net: Network<f64> = Network::new(
        &[2],
        &[
            (
                "fc1",
                LayerSpec::Linear {
                    in_features: 2,
                    out_features: 2,
                },
            ),
            ("relu", LayerSpec::Relu),
            (
                "fc2",
                LayerSpec::Linear {
                    in_features: 2,
                    out_features: 1,
                },
            ),
        ],
        &mut rng,
    )
    .unwrap();
    net.layers_mut()[0]
        .set_params(Tensor::from_vec(&[2, 2], vec![-1.0, -2.0, 1.0, 1.0]).unwrap(), Tensor::filled(&[2], 5.0))
        .unwrap();
    net.layers_mut()[2]
        .set_params(Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap(), Tensor::zeros(&[1]))
        .unwrap();
    let x = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
    let trace = dtd_trace(&net, &x, 0, &[(0.0, 1.0), (0.0, 1.0)]).unwrap();
    // hidden unit 0 (activation 2 via its bias) has no positive inputs; its relevance is dropped
    let hidden_total = trace.layer_totals[2];
    let input_total = trace.layer_totals[3];
    assert!(hidden_total > input_total);
    assert!(trace.map.values.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn bias_free_network_conserves_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = small_conv_net(&mut rng);
    for _ in 0..10 {
        let x = random_input(&[3, 15, 15], &mut rng, -1.0, 1.0);
        let bounds = vec![(-1.0, 1.0); 3];
        let target = rng.gen_range(0..2);
        let trace = dtd_trace(&net, &x, target, &bounds).unwrap();
        let seed = trace.map.decomposed_output;
        if seed == 0.0 {
            continue;
        }
        for (k, &t) in trace.layer_totals.iter().enumerate() {
            assert!(((t - seed) / seed).abs() <= 1e-9, "layer step {k}: {t} vs {seed}");
        }
        assert!(trace.map.values.data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn desk_model_conservation_with_biases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = StreamConfig::desk(Stream::Temporal);
    let mut net = cfg.build(&mut rng).unwrap();
    randomize(&mut net, &mut rng, 0.01);
    let mut checked = 0;
    for _ in 0..6 {
        let x = Tensor::from_vec(
            &[32, 64, 64],
            (0..32 * 64 * 64).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
        )
        .unwrap();
        let bounds = vec![(-2.0f32, 2.0f32); 32];
        for target in 0..2 {
            let map = dtd_relevance(&net, &x, target, &bounds).unwrap();
            assert!(map.values.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
            if map.decomposed_output > 0.0 {
                let total: f64 = map.values.data().iter().map(|&v| v as f64).sum();
                let rel = (total - map.decomposed_output).abs() / map.decomposed_output;
                assert!(rel <= 1e-3, "relative conservation error {rel}");
                checked += 1;
            }
        }
    }
    assert!(checked >= 6);
}

#[test]
fn maxpool_relevance_lands_on_winners() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net: Network<f64> = Network::new(
        &[1, 6, 6],
        &[
            (
                "pool",
                LayerSpec::MaxPool {
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                },
            ),
            (
                "fc",
                LayerSpec::Linear {
                    in_features: 9,
                    out_features: 1,
                },
            ),
        ],
        &mut rng,
    )
    .unwrap();
    let mut net = net;
    net.layers_mut()[1]
        .set_params(Tensor::filled(&[1, 9], 1.0), Tensor::zeros(&[1]))
        .unwrap();
    let x = random_input(&[1, 6, 6], &mut rng, 0.0, 1.0);
    let map = dtd_relevance(&net, &x, 0, &[(0.0, 1.0)]).unwrap();
    for by in 0..3 {
        for bx in 0..3 {
            let cells: Vec<(usize, f64)> = (0..4)
                .map(|k| {
                    let (r, c) = (by * 2 + k / 2, bx * 2 + k % 2);
                    (r * 6 + c, x.data()[r * 6 + c])
                })
                .collect();
            let winner = cells.iter().cloned().fold(cells[0], |a, b| if b.1 > a.1 { b } else { a }).0;
            for (idx, _) in cells {
                if idx != winner {
                    assert_eq!(map.values.data()[idx], 0.0);
                } else {
                    assert!(map.values.data()[idx] > 0.0);
                }
            }
        }
    }
}

#[test]
fn saliency_of_linear_score() {
    let net = linear_net(vec![3.0, 0.0, -1.0, 2.0], 2);
    let x = Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap();
    let s = saliency(&net, &x, 0).unwrap();
    assert_eq!(s.values.data(), &[3.0, 0.0]);
    let s1 = saliency(&net, &x, 1).unwrap();
    assert_eq!(s1.values.data(), &[1.0, 2.0]);
    assert_eq!(s1.method, Method::Saliency);
}

#[test]
fn saliency_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut net = small_conv_net(&mut rng);
    randomize(&mut net, &mut rng, 0.1);
    let x = random_input(&[3, 15, 15], &mut rng, -1.0, 1.0);
    let s = saliency(&net, &x, 1).unwrap();
    let score = |x: &Tensor<f64>| score_gradient(&net, x, 1, false).unwrap().1;
    let h = 1e-6;
    for idx in (0..x.len()).step_by(7) {
        let mut up = x.clone();
        up.data_mut()[idx] += h;
        let mut down = x.clone();
        down.data_mut()[idx] -= h;
        let numeric = ((score(&up) - score(&down)) / (2.0 * h)).abs();
        let analytic = s.values.data()[idx];
        let err = if analytic.max(numeric) < 1e-7 {
            (analytic - numeric).abs()
        } else {
            (analytic - numeric).abs() / analytic.max(numeric)
        };
        assert!(err < 1e-4, "index {idx}: {analytic} vs {numeric}");
    }
}

#[test]
fn guided_backprop_without_relu_is_the_gradient() {
    let net = linear_net(vec![3.0, -2.0, 0.5, 1.0], 2);
    let x = Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap();
    let g = guided_backprop(&net, &x, 0).unwrap();
    let (grad, _) = score_gradient(&net, &x, 0, false).unwrap();
    assert_eq!(g.values, grad);
}

#[test]
fn guided_backprop_zeroes_at_least_as_many_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let mut net = small_conv_net(&mut rng);
        randomize(&mut net, &mut rng, 0.1);
        let x = random_input(&[3, 15, 15], &mut rng, -1.0, 1.0);
        let guided = guided_backprop(&net, &x, 0).unwrap();
        let (plain, _) = score_gradient(&net, &x, 0, false).unwrap();
        let zeros = |t: &Tensor<f64>| t.data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros(&guided.values) >= zeros(&plain));
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let net = linear_net(vec![1.0, 1.0], 2);
    let x = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
    assert!(matches!(dtd_relevance(&net, &x, 0, &[(0.0, 1.0); 3]), Err(Error::Shape { .. })));
    assert!(matches!(saliency(&net, &x, 0), Err(Error::Shape { .. })));
}

#[test]
fn relevance_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("maps.brel");
    let records: Vec<RelevanceRecord> = (0..5)
        .map(|i| RelevanceRecord {
            event_id: format!("video_000{i}_s0010"),
            label: (i % 2) as u8,
            target_class: 0,
            method: Method::Dtd,
            stream: Stream::Temporal,
            decomposed_output: 1.5 + i as f64,
            probabilities: [0.7, 0.3],
            flip: i % 2 == 1,
            crop_offset: (4, 2),
            frame_size: 72,
            frame_indices: vec![0, 3, 6],
            shape: vec![4, 3, 2],
            values: (0..24).map(|v| (v * i) as f32 * 0.25).collect(),
        })
        .collect();
    let mut w = RelevanceWriter::create(&path).unwrap();
    for r in &records {
        w.push(r).unwrap();
    }
    assert_eq!(w.finish().unwrap(), 5);
    assert_eq!(read_relevance(&path).unwrap(), records);

    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 2] ^= 0xA5;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(read_relevance(&path), Err(Error::Checksum { chunk: 4 })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dtd_is_nonnegative_and_conservative(seed in any::<u64>(), bias in 0.0f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = small_conv_net(&mut rng);
        randomize(&mut net, &mut rng, bias);
        let x = random_input(&[3, 15, 15], &mut rng, -1.0, 1.0);
        let map = dtd_relevance(&net, &x, rng.gen_range(0..2), &[(-1.0, 1.0); 3]).unwrap();
        prop_assert!(map.values.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        let total = map.values.sum();
        prop_assert!(total <= map.decomposed_output * (1.0 + 1e-9) + 1e-12);
    }
}
