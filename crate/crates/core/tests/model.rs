use deadnet::model::{Checkpoint, LayerKind, Network, NetworkSpec};
use deadnet::rng::rng_for;
use deadnet::{Error, OpContext, Tensor};
use rand::Rng;

fn random_image(shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &[7]);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn every_table_row_matches_for_220_input() {
    let expected: [(&str, [usize; 3], [usize; 3]); 15] = [
        ("Conv1_1", [220, 220, 1], [212, 212, 16]),
        ("Conv1_2", [212, 212, 16], [212, 212, 16]),
        ("MaxPool_1", [212, 212, 16], [106, 106, 16]),
        ("Conv2_1", [106, 106, 16], [106, 106, 32]),
        ("Conv2_2", [106, 106, 32], [106, 106, 32]),
        ("MaxPool_2", [106, 106, 32], [53, 53, 32]),
        ("Conv3_1", [53, 53, 32], [53, 53, 64]),
        ("Conv3_2", [53, 53, 64], [53, 53, 64]),
        ("MaxPool_3", [53, 53, 64], [26, 26, 64]),
        ("Conv4_1", [26, 26, 64], [26, 26, 128]),
        ("Conv4_2", [26, 26, 128], [26, 26, 128]),
        ("MaxPool_4", [26, 26, 128], [13, 13, 128]),
        ("fc_1", [13, 13, 128], [1, 1, 512]),
        ("fc_2", [1, 1, 512], [1, 1, 512]),
        ("score", [1, 1, 512], [1, 1, 2]),
    ];
    let spec = NetworkSpec::deadnet();
    let shapes = spec.shapes().unwrap();
    assert_eq!(shapes.len(), 15);
    for ((name, input, output), (layer, shape)) in expected.iter().zip(spec.layers.iter().zip(&shapes)) {
        assert_eq!(&layer.name, name);
        assert_eq!(shape.input, *input, "{name} input");
        assert_eq!(shape.output, *output, "{name} output");
    }
}

#[test]
fn kernels_match_table() {
    let spec = NetworkSpec::deadnet();
    let first = &spec.layers[0];
    assert_eq!(
        first.kind,
        LayerKind::Conv { kernel: 9, stride: 1, pad: 0, in_channels: 1, out_channels: 16 }
    );
    for l in &spec.layers {
        if let LayerKind::MaxPool { window, stride } = l.kind {
            assert_eq!((window, stride), (2, 2));
        }
    }
}

// Per-layer tallies from an independent spreadsheet-style oracle:
// weights + BN scale/shift for conv and hidden fc, weights + bias for score.
#[test]
fn parameter_count_matches_tally() {
    assert_eq!(NetworkSpec::deadnet().parameter_count(), 11_635_666);
    assert_eq!(NetworkSpec::deadnet64().parameter_count(), 1_149_906);
    let net = Network::<f32>::new(NetworkSpec::deadnet64()).unwrap();
    assert_eq!(net.parameter_count(), 1_149_906);
}

#[test]
fn xavier_variance_for_conv2_1() {
    let net = Network::<f32>::build(NetworkSpec::deadnet64(), 11).unwrap();
    let idx = net.spec().layer_index("Conv2_1").unwrap();
    let w = net.layers()[idx].weights.as_ref().unwrap();
    assert_eq!(w.len(), 4608);
    let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
    let var = w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / w.len() as f64;
    let expected = 2.0 / (144.0 + 288.0);
    assert!((var - expected).abs() / expected < 0.1, "variance {var} vs {expected}");
}

#[test]
fn init_is_deterministic_and_bn_shift_zero() {
    let a = Network::<f32>::build(NetworkSpec::deadnet64(), 5).unwrap();
    let b = Network::<f32>::build(NetworkSpec::deadnet64(), 5).unwrap();
    let c = Network::<f32>::build(NetworkSpec::deadnet64(), 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for p in a.layers() {
        if let Some(bn) = &p.bn {
            assert!(bn.shift.data().iter().all(|&v| v == 0.0));
            assert!(bn.scale.data().iter().all(|&v| v == 1.0));
        }
        if let Some(bias) = &p.bias {
            assert!(bias.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn full_size_forward_caches_conv4_2() {
    let net = Network::<f32>::build(NetworkSpec::deadnet(), 1).unwrap();
    let pass = net.forward(&random_image([220, 220, 1], 1), &OpContext::inference()).unwrap();
    let probs = pass.probs.data();
    assert_eq!(probs.len(), 2);
    assert!((probs[0] + probs[1] - 1.0).abs() < 1e-6);
    let conv42 = net.spec().layer_index("Conv4_2").unwrap();
    assert_eq!(pass.layer_output(conv42).shape(), &[1, 26, 26, 128]);
    assert_eq!(pass.class_scores(0).0.len(), 2);
}

#[test]
fn inference_is_pure_over_repeated_calls() {
    let net = Network::<f32>::build(NetworkSpec::deadnet64(), 2).unwrap();
    let zero = Tensor::zeros(vec![64, 64, 1]);
    let image = random_image([64, 64, 1], 3);
    let first = net.forward(&image, &OpContext::inference()).unwrap().scores;
    let zero_first = net.class_scores(&zero).unwrap();
    for _ in 0..1000 {
        assert_eq!(net.forward(&image, &OpContext::inference()).unwrap().scores, first);
    }
    assert_eq!(net.class_scores(&zero).unwrap(), zero_first);
}

#[test]
fn training_forward_is_seeded() {
    let net = Network::<f32>::build(NetworkSpec::deadnet64(), 2).unwrap();
    let batch = Tensor::stack(&[random_image([64, 64, 1], 1), random_image([64, 64, 1], 2)]).unwrap();
    let a = net.forward(&batch, &OpContext::training(9)).unwrap().scores;
    let b = net.forward(&batch, &OpContext::training(9)).unwrap().scores;
    let c = net.forward(&batch, &OpContext::training(10)).unwrap().scores;
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn wrong_input_extent_is_rejected() {
    let net = Network::<f32>::build(NetworkSpec::deadnet64(), 2).unwrap();
    let err = net.forward(&Tensor::zeros(vec![65, 64, 1]), &OpContext::inference()).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

#[test]
fn non_finite_activation_names_layer() {
    let net = Network::<f32>::build(NetworkSpec::deadnet64(), 2).unwrap();
    let mut image = random_image([64, 64, 1], 3);
    image.data_mut()[100] = f32::NAN;
    let err = net.forward(&image, &OpContext::inference()).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");

    let mut net = net;
    let idx = net.spec().layer_index("Conv2_1").unwrap();
    let mut params: Vec<_> = net.parameters_mut().into_iter().filter(|(i, _, _)| *i == idx).collect();
    params[0].2.data_mut()[0] = f32::INFINITY;
    let err = net.forward(&random_image([64, 64, 1], 3), &OpContext::inference()).unwrap_err();
    assert!(err.to_string().contains("Conv2_1"), "{err}");
}

fn trained_looking_network() -> Network {
    // Perturb BN statistics so the round trip covers every tensor kind.
    let mut net = Network::<f32>::build(NetworkSpec::deadnet64(), 4).unwrap();
    let batch = Tensor::stack(&[random_image([64, 64, 1], 1), random_image([64, 64, 1], 2)]).unwrap();
    let pass = net.forward(&batch, &OpContext::training(1)).unwrap();
    net.update_running_stats(&pass);
    net
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let net = trained_looking_network();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let ckpt = Checkpoint::new(net.clone(), 1234, 42);
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    for seed in 0..10 {
        let x = random_image([64, 64, 1], 100 + seed);
        let a = net.forward(&x, &OpContext::inference()).unwrap();
        let b = loaded.network.forward(&x, &OpContext::inference()).unwrap();
        assert_eq!(a.scores.data(), b.scores.data());
    }
}

#[test]
fn truncated_or_corrupt_checkpoint_is_rejected() {
    let bytes = Checkpoint::new(trained_looking_network(), 1, 1).to_bytes().unwrap();
    for len in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..len]), Err(Error::Checkpoint(_))), "len {len}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() - 100;
    flipped[mid] ^= 0x40;
    let err = Checkpoint::from_bytes(&flipped).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&magic).unwrap_err().to_string().contains("magic"));
}

#[test]
fn version_mismatch_is_rejected() {
    let bytes = Checkpoint::new(Network::new(NetworkSpec::deadnet64()).unwrap(), 0, 0).to_bytes().unwrap();
    let text = String::from_utf8_lossy(&bytes[12..200]).into_owned();
    let pos = text.find("\"format_version\":1").expect("version field near start of header") + 12;
    let digit = pos + "\"format_version\":".len();
    let mut edited = bytes.clone();
    edited[digit] = b'7';
    let body_end = edited.len() - 4;
    let crc = crc32fast::hash(&edited[8..body_end]);
    edited[body_end..].copy_from_slice(&crc.to_le_bytes());
    let err = Checkpoint::from_bytes(&edited).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
}

#[test]
fn mismatched_spec_names_first_layer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    Checkpoint::new(Network::new(NetworkSpec::deadnet64()).unwrap(), 0, 0).save(&path).unwrap();
    let mut other = NetworkSpec::deadnet64();
    let idx = other.layer_index("Conv3_2").unwrap();
    other.layers[idx].kind = LayerKind::Conv { kernel: 5, stride: 1, pad: 2, in_channels: 64, out_channels: 64 };
    match Checkpoint::load_matching(&path, &other) {
        Err(Error::LayerMismatch { layer, .. }) => assert_eq!(layer, "Conv3_2"),
        other => panic!("expected layer mismatch, got {other:?}"),
    }
    assert!(Checkpoint::load_matching(&path, &NetworkSpec::deadnet64()).is_ok());
}
