//! Finite-difference checks of every differentiable operation and of a
//! whole network, shared by the test suite and the acceptance runner.
//!
//! Each op is wrapped in the scalar objective `L = Σ R ⊙ op(x)` with a random
//! projection `R`, so the analytic gradient is the op's backward pass applied
//! to `R`.

use rand::Rng as _;

use crate::error::Result;
use crate::model::{Network, NetworkSpec};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::tensor::gradcheck::{gradient_check, gradient_check_piecewise, GradCheckConfig, GradCheckReport};
use crate::tensor::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, dropout, dropout_backward, fc, fc_backward, maxpool,
    maxpool_backward, maxpool_with_indices, relu, relu_backward, softmax_xent, OpContext, RunningStats, Tensor,
};

pub const TOLERANCE: f64 = 1e-4;
const MAX_SHRINKS: usize = 3;
/// A loss near 0.7 is quantized to ~1e-16, i.e. ~1e-10 in a 1e-6 difference
/// quotient; gradients below the floor are compared in absolute terms.
const NETWORK_PROBE: GradCheckConfig = GradCheckConfig { step: 1e-6, coordinates: 0, seed: 0, floor: 1e-5 };

#[derive(Debug, Clone)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
    /// Probes dropped because every step crossed a kink.
    pub straddling: usize,
}

type T64 = Tensor<f64>;

fn uniform(shape: &[usize], rng: &mut Rng) -> T64 {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn project(r: &T64, y: &T64) -> f64 {
    r.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

fn with(t: &T64, x: &[f64]) -> T64 {
    Tensor::new(t.shape().to_vec(), x.to_vec()).expect("same length")
}

fn check(name: String, cfg: &GradCheckConfig, point: &T64, analytic: &T64, loss: impl FnMut(&[f64]) -> f64) -> NamedReport {
    NamedReport { name, report: gradient_check(loss, point.data(), analytic.data(), cfg), straddling: 0 }
}

/// Checks for conv, max-pool, ReLU, batch norm (both modes), dropout, fc
/// and softmax cross-entropy, `instances` random problems each.
pub fn op_checks(instances: usize, seed: u64) -> Result<Vec<NamedReport>> {
    let mut out = Vec::new();
    let geometries = [(1, 0), (1, 1), (2, 1), (1, 2), (2, 0)];
    for i in 0..instances {
        let mut rng = rng_for(seed, &[0x6c, i as u64]);
        let cfg = GradCheckConfig { seed: derive_seed(seed, &[i as u64]), ..GradCheckConfig::default() };

        // conv2d, 8×8×2 input
        let (stride, pad) = geometries[i % geometries.len()];
        let x = uniform(&[2, 8, 8, 2], &mut rng);
        let k = uniform(&[3, 3, 2, 3], &mut rng);
        let y = conv2d(&x, &k, stride, pad)?;
        let r = uniform(y.shape(), &mut rng);
        let (dx, dk) = conv2d_backward(&x, &k, stride, pad, &r)?;
        out.push(check(format!("conv2d input #{i}"), &cfg, &x, &dx, |v| {
            project(&r, &conv2d(&with(&x, v), &k, stride, pad).unwrap())
        }));
        out.push(check(format!("conv2d kernels #{i}"), &cfg, &k, &dk, |v| {
            project(&r, &conv2d(&x, &with(&k, v), stride, pad).unwrap())
        }));

        // max-pool
        let x = uniform(&[2, 6, 6, 3], &mut rng);
        let (y, idx) = maxpool_with_indices(&x, 2, 2)?;
        let r = uniform(y.shape(), &mut rng);
        let dx = maxpool_backward(x.shape(), &idx, &r)?;
        out.push(check(format!("maxpool #{i}"), &cfg, &x, &dx, |v| project(&r, &maxpool(&with(&x, v), 2, 2).unwrap())));

        // ReLU, inputs kept away from the kink
        let x = Tensor::from_fn(vec![40], |_| {
            let m: f64 = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        });
        let r = uniform(x.shape(), &mut rng);
        let dx = relu_backward(&x, &r)?;
        out.push(check(format!("relu #{i}"), &cfg, &x, &dx, |v| project(&r, &relu(&with(&x, v)))));

        // batch norm, training mode (batch 4) and inference mode
        let x = uniform(&[4, 3, 3, 2], &mut rng);
        let scale = uniform(&[2], &mut rng);
        let shift = uniform(&[2], &mut rng);
        let running = RunningStats { mean: uniform(&[2], &mut rng), var: Tensor::from_fn(vec![2], |_| rng.random_range(0.5..2.0)) };
        for (mode, ctx) in [("training", OpContext::training(1)), ("inference", OpContext::inference())] {
            let (y, cache) = batchnorm(&x, &scale, &shift, &running, &ctx)?;
            let r = uniform(y.shape(), &mut rng);
            let g = batchnorm_backward(&cache, &scale, &r)?;
            let f = |x: &T64, s: &T64, b: &T64| project(&r, &batchnorm(x, s, b, &running, &ctx).unwrap().0);
            out.push(check(format!("batchnorm {mode} input #{i}"), &cfg, &x, &g.input, |v| f(&with(&x, v), &scale, &shift)));
            out.push(check(format!("batchnorm {mode} scale #{i}"), &cfg, &scale, &g.scale, |v| f(&x, &with(&scale, v), &shift)));
            out.push(check(format!("batchnorm {mode} shift #{i}"), &cfg, &shift, &g.shift, |v| f(&x, &scale, &with(&shift, v))));
        }

        // dropout with a fixed mask
        let x = uniform(&[3, 20], &mut rng);
        let ctx = OpContext::training(derive_seed(seed, &[0xd, i as u64]));
        let (y, mask) = dropout(&x, 0.5, &ctx, 3)?;
        let r = uniform(y.shape(), &mut rng);
        let dx = dropout_backward(mask.as_ref(), &r)?;
        out.push(check(format!("dropout #{i}"), &cfg, &x, &dx, |v| project(&r, &dropout(&with(&x, v), 0.5, &ctx, 3).unwrap().0)));

        // fc with bias
        let x = uniform(&[3, 10], &mut rng);
        let w = uniform(&[4, 10], &mut rng);
        let b = uniform(&[4], &mut rng);
        let y = fc(&x, &w, Some(&b))?;
        let r = uniform(y.shape(), &mut rng);
        let g = fc_backward(&x, &w, true, &r)?;
        out.push(check(format!("fc input #{i}"), &cfg, &x, &g.input, |v| project(&r, &fc(&with(&x, v), &w, Some(&b)).unwrap())));
        out.push(check(format!("fc weights #{i}"), &cfg, &w, &g.weights, |v| project(&r, &fc(&x, &with(&w, v), Some(&b)).unwrap())));
        let db = g.bias.expect("bias gradient");
        out.push(check(format!("fc bias #{i}"), &cfg, &b, &db, |v| project(&r, &fc(&x, &w, Some(&with(&b, v))).unwrap())));

        // softmax cross-entropy
        let logits = Tensor::from_fn(vec![5, 3], |_| rng.random_range(-3.0..3.0));
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
        let xent = softmax_xent(&logits, &labels)?;
        out.push(check(format!("softmax_xent #{i}"), &cfg, &logits, &xent.grad, |v| {
            softmax_xent(&with(&logits, v), &labels).unwrap().loss
        }));
    }
    Ok(out)
}

/// Gradient of the mean cross-entropy of a whole network, in 64-bit, with
/// respect to `per_tensor` coordinates of every learnable tensor and of the
/// input. Training mode, so batch statistics and a fixed dropout mask are
/// part of the differentiated function. Probes whose stencil flips a ReLU
/// or a max-pool choice are retried with a smaller step, then replaced.
pub fn network_check(spec: NetworkSpec, per_tensor: usize, batch: usize, seed: u64) -> Result<Vec<NamedReport>> {
    let net = Network::<f32>::build(spec, seed)?.cast::<f64>();
    let [h, w, c] = net.spec().input;
    let mut rng = rng_for(seed, &[0x4e7]);
    let images = uniform(&[batch, h, w, c], &mut rng);
    let labels: Vec<usize> = (0..batch).map(|i| i % net.spec().classes).collect();
    let ctx = OpContext::training(derive_seed(seed, &[0xf0]));
    let (_, _, grads) = net.loss_and_gradients(&images, &labels, &ctx)?;
    let eval = |n: &Network<f64>, x: &T64| -> (f64, u64) {
        let pass = n.forward(x, &ctx).unwrap();
        (softmax_xent(&pass.scores, &labels).unwrap().loss, pass.activation_pattern())
    };

    let mut out = Vec::new();
    let names: Vec<String> = net
        .parameters()
        .iter()
        .map(|(layer, kind, _)| format!("{} {}", net.spec().layers[*layer].name, kind.as_str()))
        .collect();
    for (j, name) in names.into_iter().enumerate() {
        let cfg = GradCheckConfig { coordinates: per_tensor, seed: derive_seed(seed, &[j as u64]), ..NETWORK_PROBE };
        let point = net.parameters()[j].2.clone();
        let mut probe = net.clone();
        let r = gradient_check_piecewise(
            |v| {
                probe.parameters_mut()[j].2.data_mut().copy_from_slice(v);
                eval(&probe, &images)
            },
            point.data(),
            grads.params[j].data(),
            &cfg,
            MAX_SHRINKS,
        );
        out.push(NamedReport { name, report: r.report, straddling: r.straddling });
    }
    let cfg = GradCheckConfig { coordinates: per_tensor, seed: derive_seed(seed, &[0x1a]), ..NETWORK_PROBE };
    let r = gradient_check_piecewise(|v| eval(&net, &with(&images, v)), images.data(), grads.input.data(), &cfg, MAX_SHRINKS);
    out.push(NamedReport { name: "network input".into(), report: r.report, straddling: r.straddling });
    Ok(out)
}

/// Worst report of a set.
pub fn worst(reports: &[NamedReport]) -> Option<&NamedReport> {
    reports.iter().max_by(|a, b| a.report.max_relative_error.total_cmp(&b.report.max_relative_error))
}
