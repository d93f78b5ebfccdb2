use deadnet::augment::{crop, variance_normalize};
use deadnet::heatmap::*;
use deadnet::interpret::gradcam_upsample;
use deadnet::model::{Network, NetworkSpec, HEALTHY, SICK};
use deadnet::tensor::{OpContext, Tensor};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0f32))
}

fn direct(net: &Network, window: &Tensor) -> [f64; 2] {
    let pass = net.forward(&variance_normalize(window).unwrap(), &OpContext::inference()).unwrap();
    [pass.probs.data()[HEALTHY] as f64, pass.probs.data()[SICK] as f64]
}

#[test]
fn single_window_equals_direct_classification() {
    let net = Network::build(NetworkSpec::deadnet(), 1).unwrap();
    let image = random(vec![220, 220, 1], 2);
    for stride in [1, 110, 500] {
        let map = sliding_window_classify(&net, &image, 220, stride).unwrap();
        assert_eq!(map.grid.shape(), &[1, 1]);
        assert_eq!(map.grid.data()[0], direct(&net, &image)[1]);
    }
    assert!(sliding_window_classify(&net, &random(vec![200, 300, 1], 3), 220, 110).is_err());
    assert!(sliding_window_classify(&net, &image, 64, 110).is_err());
}

#[test]
fn quadrant_grid_matches_per_quadrant_classification() {
    let net = Network::build(NetworkSpec::deadnet(), 4).unwrap();
    let mut image = random(vec![440, 440, 1], 5);
    // Different statistics per quadrant so the four cells differ.
    for (i, v) in image.data_mut().iter_mut().enumerate() {
        let (y, x) = (i / 440, i % 440);
        *v *= 1.0 + (2 * (y / 220) + x / 220) as f32;
    }
    let map = sliding_window_classify(&net, &image, 220, 220).unwrap();
    assert_eq!(map.grid.shape(), &[2, 2]);
    for r in 0..2 {
        for c in 0..2 {
            let [healthy, sick] = direct(&net, &crop(&image, r * 220, c * 220, 220, 220).unwrap());
            assert_eq!(map.grid.data()[r * 2 + c], sick);
            assert!((healthy + sick - 1.0).abs() <= 1e-6);
        }
    }
    let side = map.sidecar();
    assert_eq!((side.rows, side.cols, side.window, side.stride, side.image_height), (2, 2, 220, 220, 440));
}

#[test]
fn gradcam_sized_map_keeps_its_extrema() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let map = Tensor::from_fn(vec![26, 26], |_| rng.random_range(-3.0..5.0));
    let up = bilinear_upsample(&map, 220, 220).unwrap();
    assert_eq!(up.shape(), &[220, 220]);
    // Not every source cell lands on an output pixel, so extrema hold as bounds.
    assert!(up.max_value() <= map.max_value() + 1e-6 && up.min_value() >= map.min_value() - 1e-6);
    for (src, dst) in [(0, 0), (25, 219), (26 * 25, 220 * 219), (26 * 26 - 1, 220 * 220 - 1)] {
        assert_eq!(up.data()[dst], map.data()[src]);
    }
    assert!(bilinear_upsample(&map, 20, 220).is_err());
}

#[test]
fn receptive_field_placement_registers_cells_on_their_centres() {
    let spec = NetworkSpec::deadnet64();
    let map = Tensor::from_fn(vec![7, 7], |i| (i / 7 * 10 + i % 7) as f64);
    let up = gradcam_upsample(&spec, "Conv4_2", &map).unwrap();
    assert_eq!(up.shape(), &[64, 64]);
    // Cell (j, k) is centred on input pixel 7.5 + 8j; on a linear map the four
    // surrounding pixels average to the cell value.
    for j in 1..6 {
        for k in 1..6 {
            let (y, x) = (7 + 8 * j, 7 + 8 * k);
            let around = (up.data()[y * 64 + x] + up.data()[y * 64 + x + 1] + up.data()[(y + 1) * 64 + x] + up.data()[(y + 1) * 64 + x + 1]) / 4.0;
            assert!((around - map.data()[j * 7 + k]).abs() < 1e-12);
        }
    }
    // Borders beyond the outermost centres hold the edge values.
    assert_eq!(up.data()[0], 0.0);
    assert_eq!(up.data()[63 * 64 + 63], 66.0);
    assert!(gradcam_upsample(&spec, "fc_1", &map).is_err());
}

#[test]
fn overlay_validates_extents_and_blends_monotonically() {
    let base = random(vec![4, 5, 1], 7);
    assert!(overlay_encode(&base, &Tensor::zeros(vec![5, 4]), 0.5).is_err());
    let low = overlay_encode(&base, &Tensor::full(vec![4, 5], 0.2), 0.8).unwrap();
    let high = overlay_encode(&base, &Tensor::full(vec![4, 5], 0.7), 0.8).unwrap();
    for (l, h) in low.data().chunks(3).zip(high.data().chunks(3)) {
        assert!(h[0] >= l[0] && h[1] <= l[1] && h[2] <= l[2]);
    }
    let dir = tempfile::tempdir().unwrap();
    let net = Network::build(NetworkSpec::deadnet64(), 8).unwrap();
    let map = sliding_window_classify(&net, &random(vec![100, 130, 1], 9), 64, 32).unwrap();
    assert_eq!(map.grid.shape(), &[2, 3]);
    let path = dir.path().join("grid.f32");
    map.save_raw(&path).unwrap();
    let (grid, side) = deadnet::dataset::load_raw(&path).unwrap();
    assert_eq!(grid.shape(), &[2, 3]);
    assert_eq!(side.extra["stride"], 32);
    assert_eq!(side.extra["image_width"], 130);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn upsampling_is_exact_on_constants_and_lattice(
        h in 2usize..8, w in 2usize..8, fy in 1usize..5, fx in 1usize..5, c in -10.0f64..10.0, seed in any::<u64>()
    ) {
        let flat = Tensor::full(vec![h, w], c);
        let (oh, ow) = ((h - 1) * fy + 1, (w - 1) * fx + 1);
        prop_assert!(bilinear_upsample(&flat, oh, ow).unwrap().data().iter().all(|&v| v == c));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = Tensor::from_fn(vec![h, w], |_| rng.random_range(-1.0..1.0));
        let up = bilinear_upsample(&map, oh, ow).unwrap();
        for y in 0..h {
            for x in 0..w {
                prop_assert!((up.data()[y * fy * ow + x * fx] - map.data()[y * w + x]).abs() < 1e-12);
            }
        }
        prop_assert!(up.max_value() <= map.max_value() + 1e-12 && up.min_value() >= map.min_value() - 1e-12);
    }

    #[test]
    fn overlay_keeps_unit_range(opacity in 0.0f64..=1.0, seed in any::<u64>()) {
        let base = random(vec![3, 3, 1], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = Tensor::from_fn(vec![3, 3], |_| rng.random_range(-0.5..1.5));
        let rgb = overlay_encode(&base, &map, opacity).unwrap();
        prop_assert!(rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
