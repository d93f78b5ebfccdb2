use deadnet::interpret::*;
use deadnet::model::{Network, NetworkSpec, HEALTHY, SICK};
use deadnet::tensor::{OpContext, Tensor};
use deadnet::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![h, w, 1], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn weights_match_channel_wise_finite_differences() {
    let net = Network::<f32>::build(NetworkSpec::deadnet64(), 3).unwrap().cast::<f64>();
    let image = random_image(64, 64, 1);
    let layer = net.spec().layer_index(DEFAULT_LAYER).unwrap();
    let ctx = OpContext::inference();
    let base = net.forward(&image, &ctx).unwrap().layer_output(layer).clone();
    let (h, w, k) = (base.shape()[1], base.shape()[2], base.shape()[3]);
    for class in [HEALTHY, SICK] {
        let cam = gradcam_weights(&net, &image, class, DEFAULT_LAYER).unwrap();
        assert_eq!(cam.weights.domain, h * w);
        assert_eq!(cam.weights.layer, "Conv4_2");
        // Shifting a whole channel leaves the following max-pool choices intact.
        for channel in (0..k).step_by(13) {
            let step = 1e-6;
            let score = |delta: f64| {
                let mut a = base.clone();
                for (i, v) in a.data_mut().iter_mut().enumerate() {
                    if i % k == channel {
                        *v += delta;
                    }
                }
                net.scores_from(layer, &a, &ctx).unwrap().data()[class]
            };
            let numeric = (score(step) - score(-step)) / (2.0 * step) / (h * w) as f64;
            let analytic = cam.weights.weights[channel];
            assert!(
                (numeric - analytic).abs() <= 1e-6 * analytic.abs().max(1e-3),
                "class {class} channel {channel}: {analytic} vs {numeric}"
            );
        }
    }
}

#[test]
fn maps_are_rectified_and_the_sum_is_linear() {
    let net = Network::build(NetworkSpec::deadnet64(), 4).unwrap();
    let image = random_image(64, 64, 2).cast::<f32>();
    let cam = gradcam_weights(&net, &image, SICK, DEFAULT_LAYER).unwrap();
    let other = gradcam_weights(&net, &image, HEALTHY, DEFAULT_LAYER).unwrap();
    let map = gradcam_map(&cam.maps, &cam.weights.weights).unwrap();
    assert!(map.data().iter().all(|&v| v >= 0.0));
    let pre = gradcam_pre_relu(&cam.maps, &cam.weights.weights).unwrap();
    assert_eq!(map, pre.map(|v| v.max(0.0)));
    let pre2 = gradcam_pre_relu(&cam.maps, &other.weights.weights).unwrap();
    let summed: Vec<f64> = cam.weights.weights.iter().zip(&other.weights.weights).map(|(a, b)| a + b).collect();
    let joint = gradcam_pre_relu(&cam.maps, &summed).unwrap();
    for ((j, a), b) in joint.data().iter().zip(pre.data()).zip(pre2.data()) {
        assert!((j - (a + b)).abs() <= 1e-12 * (a.abs() + b.abs()).max(1e-12));
    }
    assert!(gradcam_weights(&net, &image, 2, DEFAULT_LAYER).is_err());
    assert!(gradcam_weights(&net, &image, SICK, "Conv9_9").is_err());
}

#[test]
fn identical_crops_give_identical_ensemble_maps() {
    let net = Network::build(NetworkSpec::deadnet64(), 5).unwrap();
    let images: Vec<Tensor> = (0..4).map(|i| random_image(64, 64, 10 + i).cast()).collect();
    let per: Vec<(usize, GradCamWeights)> = images
        .iter()
        .enumerate()
        .map(|(i, im)| (i % 2, gradcam_weights(&net, im, SICK, DEFAULT_LAYER).unwrap().weights))
        .collect();
    let ens = ensemble_weights(&per, SICK).unwrap();
    assert_eq!(ens.count, 2);
    for (k, w) in ens.weights.iter().enumerate() {
        assert!((w - (per[1].1.weights[k] + per[3].1.weights[k]) / 2.0).abs() < 1e-15);
    }
    let crop = images[0].clone();
    let a = gradcam_weights(&net, &crop, SICK, DEFAULT_LAYER).unwrap();
    let b = gradcam_weights(&net, &crop.clone(), SICK, DEFAULT_LAYER).unwrap();
    assert_eq!(gradcam_map(&a.maps, &ens.weights).unwrap(), gradcam_map(&b.maps, &ens.weights).unwrap());
    assert!(ensemble_weights(&per, 5).is_err());
}

fn linear(weights: Tensor) -> LinearScorer {
    LinearScorer { weights: vec![weights.map(|v| -v), weights] }
}

#[test]
fn zero_gradient_from_zero_stays_zero() {
    let scorer = linear(Tensor::zeros(vec![16, 16, 1]));
    let cfg = ClassModelConfig { iterations: 200, snapshot_every: 50, ..Default::default() };
    let m = class_model(&scorer, 1, &cfg).unwrap();
    assert!(m.image.data().iter().all(|&v| v == 0.0));
    assert_eq!(m.snapshots.len(), 4);
    assert!(m.snapshots.iter().all(|(_, s)| s.data().iter().all(|&v| v == 0.0)));
    assert!(m.scores.iter().all(|&s| s == 0.0));
}

#[test]
fn linear_scorer_converges_to_weights_over_l2_penalty() {
    let w = random_image(12, 10, 7).cast::<f32>();
    let cfg = ClassModelConfig { smoothness_penalty: 0.0, ..Default::default() };
    let m = class_model(&linear(w.clone()), 1, &cfg).unwrap();
    for (got, want) in m.image.data().iter().zip(w.data()) {
        let target = want / cfg.l2_penalty as f32;
        assert!((got - target).abs() <= 0.01 * target.abs().max(1e-3), "{got} vs {target}");
    }
    assert!(m.scores.windows(2).all(|p| p[1] >= p[0]));
}

/// Dense replicated-border Laplacian, assembled independently of the stencil code.
fn laplacian_matrix(h: usize, w: usize) -> DMatrix<f64> {
    let n = h * w;
    let mut m = DMatrix::zeros(n, n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let ny = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let nx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                m[(i, ny * w + nx)] += 1.0;
                m[(i, i)] -= 1.0;
            }
        }
    }
    m
}

#[test]
fn smoothed_fixed_point_solves_the_linear_system() {
    let (h, w) = (8, 9);
    let weights = random_image(h, w, 8);
    let lap = laplacian_matrix(h, w);
    let wv = DVector::from_column_slice(weights.data());
    for (sign, s) in [(SmoothingSign::Published, -1.0), (SmoothingSign::Descent, 1.0)] {
        let cfg = ClassModelConfig {
            iterations: 3000,
            smoothing_sign: sign,
            smoothness_penalty: 0.001,
            snapshot_every: 0,
            ..Default::default()
        };
        let m = class_model(&linear(weights.cast()), 1, &cfg).unwrap();
        // 0 = w − λ1·I + s·λ2·L·I
        let a = DMatrix::identity(h * w, h * w) * cfg.l2_penalty - &lap * (s * cfg.smoothness_penalty);
        let expect = a.lu().solve(&wv).unwrap();
        for (got, want) in m.image.data().iter().zip(expect.iter()) {
            assert!((*got as f64 - want).abs() <= 1e-4 * want.abs().max(1.0), "{sign:?}: {got} vs {want}");
        }
    }
}

#[test]
fn runaway_ascent_reports_the_iteration() {
    let scorer = linear(Tensor::full(vec![8, 8, 1], 1.0));
    let cfg = ClassModelConfig { step: 1e3, l2_penalty: 5.0, smoothness_penalty: 0.0, iterations: 1000, ..Default::default() };
    match class_model(&scorer, 1, &cfg) {
        Err(Error::Diverged { iteration, .. }) => assert!(iteration > 1 && iteration < 1000, "{iteration}"),
        other => panic!("expected divergence, got {:?}", other.map(|m| m.scores.len())),
    }
    assert!(class_model(&scorer, 2, &ClassModelConfig::default()).is_err());
}

#[test]
fn network_class_model_raises_the_score() {
    let net = Network::build(NetworkSpec::deadnet64(), 6).unwrap();
    // Zero is a stationary point of an untrained net (every ReLU input is exactly 0).
    let zero = class_model(&net, SICK, &ClassModelConfig { iterations: 3, ..Default::default() }).unwrap();
    assert!(zero.image.data().iter().all(|&v| v == 0.0));
    let start = random_image(64, 64, 9).cast::<f32>().into_data();
    let cfg = ClassModelConfig { step: 0.05, iterations: 8, snapshot_every: 4, init: ClassModelInit::Image(start), ..Default::default() };
    let m = class_model(&net, SICK, &cfg).unwrap();
    assert_eq!(m.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![4, 8]);
    assert!(m.scores.last().unwrap() > m.scores.first().unwrap(), "{:?}", m.scores);
    let shown = display_normalize(&m.image);
    assert!(shown.min_value() >= 0.0 && shown.max_value() <= 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_sums_to_zero_and_kills_constants(h in 3usize..12, w in 3usize..12, c in -5.0f64..5.0, seed in any::<u64>()) {
        let img = random_image(h, w, seed);
        prop_assert!(laplacian(&img).unwrap().sum().abs() < 1e-12);
        let flat = Tensor::<f64>::full(vec![h, w, 1], c);
        prop_assert!(laplacian(&flat).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn map_is_nonnegative(seed in any::<u64>(), k in 1usize..6) {
        let maps = random_image(5, 5 * k, seed).reshape(vec![5, 5, k]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        prop_assert!(gradcam_map(&maps, &weights).unwrap().data().iter().all(|&v| v >= 0.0));
    }
}
