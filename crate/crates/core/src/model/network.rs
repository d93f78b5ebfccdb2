use rand_distr::{Distribution, Uniform};

use super::spec::{LayerKind, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{
    batchnorm, batchnorm_backward, conv2d, conv2d_backward, dropout, dropout_backward, fc, fc_backward,
    maxpool_backward, maxpool_with_indices, relu, relu_backward, softmax, softmax_xent, BnCache, OpContext,
    RunningStats, Scalar, Tensor,
};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T: Scalar> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running: RunningStats<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Scalar> {
    pub weights: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
    pub bn: Option<BatchNormParams<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weights,
    Bias,
    BnScale,
    BnShift,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weights => "weights",
            ParamKind::Bias => "bias",
            ParamKind::BnScale => "bn_scale",
            ParamKind::BnShift => "bn_shift",
        }
    }

    /// Only conv/fc weights take L2 decay.
    pub fn decays(self) -> bool {
        self == ParamKind::Weights
    }
}

/// Pre-softmax score per class for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores(pub Vec<f64>);

#[derive(Debug, Clone)]
pub struct LayerCache<T: Scalar> {
    bn: Option<BnCache<T>>,
    pre_relu: Option<Tensor<T>>,
    mask: Option<Tensor<T>>,
    pool_indices: Option<Vec<usize>>,
}

/// Everything a forward pass produced: scores, probabilities and every
/// intermediate activation (needed for backward and Grad-CAM).
#[derive(Debug, Clone)]
pub struct ForwardPass<T: Scalar> {
    /// `N×K` pre-softmax scores.
    pub scores: Tensor<T>,
    pub probs: Tensor<T>,
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    activations: Vec<Tensor<T>>,
    caches: Vec<LayerCache<T>>,
    training: bool,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn layer_output(&self, index: usize) -> &Tensor<T> {
        &self.activations[index + 1]
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.activations[0]
    }

    /// Hash of every ReLU sign and max-pool choice. Two passes with the same
    /// pattern lie on the same linear piece of the network.
    pub fn activation_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for c in &self.caches {
            if let Some(pre) = &c.pre_relu {
                for chunk in pre.data().chunks(64) {
                    chunk.iter().fold(0u64, |bits, v| bits << 1 | u64::from(*v > T::zero())).hash(&mut h);
                }
            }
            c.pool_indices.hash(&mut h);
        }
        h.finish()
    }

    pub fn class_scores(&self, item: usize) -> ClassScores {
        let k = self.scores.shape()[1];
        ClassScores(self.scores.data()[item * k..(item + 1) * k].iter().map(|v| v.as_f64()).collect())
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    /// Same order as [`Network::parameters`].
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
    /// Gradient with respect to the captured layer's output, if requested.
    pub captured: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Scalar = f32> {
    spec: NetworkSpec,
    layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> Network<T> {
    /// Allocate parameters for `spec`: zero weights, unit BN scale.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers.iter().map(empty_params).collect();
        Ok(Self { spec, layers })
    }

    /// Build and Xavier-initialize in one step.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::new(spec)?;
        net.xavier_init(seed);
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.layers
    }

    /// Uniform Glorot initialization: weights on ±sqrt(6/(fan_in + fan_out)),
    /// BN scale 1 and shift 0, biases 0. Each layer draws from its own
    /// stream of `seed`.
    pub fn xavier_init(&mut self, seed: u64) {
        for (i, (spec, params)) in self.spec.layers.iter().zip(&mut self.layers).enumerate() {
            *params = empty_params(spec);
            let (fan_in, fan_out) = match spec.kind {
                LayerKind::Conv { kernel, in_channels, out_channels, .. } => {
                    (kernel * kernel * in_channels, kernel * kernel * out_channels)
                }
                LayerKind::Fc { inputs, outputs } => (inputs, outputs),
                LayerKind::MaxPool { .. } => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).unwrap();
            let mut rng = rng_for(seed, &[i as u64]);
            if let Some(w) = params.weights.as_mut() {
                w.data_mut().iter_mut().for_each(|v| *v = T::lit(dist.sample(&mut rng)));
            }
        }
    }

    /// Learnable tensors in a fixed order: per layer weights, bias, BN scale, BN shift.
    pub fn parameters(&self) -> Vec<(usize, ParamKind, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, p) in self.layers.iter().enumerate() {
            if let Some(w) = &p.weights {
                out.push((i, ParamKind::Weights, w));
            }
            if let Some(b) = &p.bias {
                out.push((i, ParamKind::Bias, b));
            }
            if let Some(bn) = &p.bn {
                out.push((i, ParamKind::BnScale, &bn.scale));
                out.push((i, ParamKind::BnShift, &bn.shift));
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(usize, ParamKind, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, p) in self.layers.iter_mut().enumerate() {
            if let Some(w) = p.weights.as_mut() {
                out.push((i, ParamKind::Weights, w));
            }
            if let Some(b) = p.bias.as_mut() {
                out.push((i, ParamKind::Bias, b));
            }
            if let Some(bn) = p.bn.as_mut() {
                out.push((i, ParamKind::BnScale, &mut bn.scale));
                out.push((i, ParamKind::BnShift, &mut bn.shift));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|p| LayerParams {
                weights: p.weights.as_ref().map(Tensor::cast),
                bias: p.bias.as_ref().map(Tensor::cast),
                bn: p.bn.as_ref().map(|bn| BatchNormParams {
                    scale: bn.scale.cast(),
                    shift: bn.shift.cast(),
                    running: RunningStats { mean: bn.running.mean.cast(), var: bn.running.var.cast() },
                }),
            })
            .collect();
        Network { spec: self.spec.clone(), layers }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let [h, w, c] = self.spec.input;
        match input.shape() {
            s if s == [h, w, c] => input.clone().reshape(vec![1, h, w, c]),
            [_, ih, iw, ic] if [*ih, *iw, *ic] == [h, w, c] => Ok(input.clone()),
            s => Err(Error::shape(format!("network expects {h}×{w}×{c} images, got {s:?}"))),
        }
    }

    fn apply_layer(&self, i: usize, x: &Tensor<T>, ctx: &OpContext) -> Result<(Tensor<T>, LayerCache<T>)> {
        let spec = &self.spec.layers[i];
        let params = &self.layers[i];
        let mut cache = LayerCache { bn: None, pre_relu: None, mask: None, pool_indices: None };
        let mut y = match spec.kind {
            LayerKind::Conv { stride, pad, .. } => conv2d(x, params.weights.as_ref().unwrap(), stride, pad)?,
            LayerKind::Fc { .. } => fc(x, params.weights.as_ref().unwrap(), params.bias.as_ref())?,
            LayerKind::MaxPool { window, stride } => {
                let (y, idx) = maxpool_with_indices(x, window, stride)?;
                cache.pool_indices = Some(idx);
                y
            }
        };
        y.check_finite(&format!("output of layer `{}`", spec.name))?;
        if let Some(bn) = &params.bn {
            let (z, bc) = batchnorm(&y, &bn.scale, &bn.shift, &bn.running, ctx)?;
            cache.bn = Some(bc);
            y = z;
        }
        if spec.relu {
            let z = relu(&y);
            cache.pre_relu = Some(y);
            y = z;
        }
        if let Some(p) = spec.dropout {
            let (z, mask) = dropout(&y, p, ctx, i as u64)?;
            cache.mask = mask;
            y = z;
        }
        Ok((y, cache))
    }

    /// Run the network on an image (`H×W×C`) or batch (`N×H×W×C`).
    pub fn forward(&self, input: &Tensor<T>, ctx: &OpContext) -> Result<ForwardPass<T>> {
        let mut x = self.check_input(input)?;
        x.check_finite("network input")?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let (y, cache) = self.apply_layer(i, &x, ctx)?;
            activations.push(std::mem::replace(&mut x, y));
            caches.push(cache);
        }
        let probs = softmax(&x)?;
        activations.push(x.clone());
        Ok(ForwardPass { scores: x, probs, activations, caches, training: ctx.training })
    }

    /// Scores obtained by feeding `activation` in as the output of layer
    /// `layer` and running the remaining layers.
    pub fn scores_from(&self, layer: usize, activation: &Tensor<T>, ctx: &OpContext) -> Result<Tensor<T>> {
        if layer >= self.layers.len() {
            return Err(Error::UnknownLayer(format!("index {layer}")));
        }
        let mut x = activation.clone();
        for i in layer + 1..self.layers.len() {
            x = self.apply_layer(i, &x, ctx)?.0;
        }
        Ok(x)
    }

    /// Back-propagate `grad_scores` (gradient of some objective with respect
    /// to the `N×K` scores) through a recorded forward pass.
    ///
    /// `capture` names a layer whose output gradient should be kept.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        grad_scores: &Tensor<T>,
        capture: Option<usize>,
    ) -> Result<Gradients<T>> {
        pass.scores.expect_same_shape(grad_scores, "backward")?;
        let mut g = grad_scores.clone();
        let mut captured = None;
        let mut per_layer: Vec<(Option<Tensor<T>>, Option<Tensor<T>>, Option<(Tensor<T>, Tensor<T>)>)> =
            vec![(None, None, None); self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let spec = &self.spec.layers[i];
            let params = &self.layers[i];
            let cache = &pass.caches[i];
            let x = &pass.activations[i];
            if capture == Some(i) {
                captured = Some(g.clone());
            }
            if spec.dropout.is_some() {
                g = dropout_backward(cache.mask.as_ref(), &g)?;
            }
            if let Some(pre) = &cache.pre_relu {
                g = relu_backward(pre, &g)?;
            }
            if let (Some(bn), Some(bc)) = (&params.bn, &cache.bn) {
                let grads = batchnorm_backward(bc, &bn.scale, &g)?;
                per_layer[i].2 = Some((grads.scale, grads.shift));
                g = grads.input;
            }
            g = match spec.kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let (dx, dw) = conv2d_backward(x, params.weights.as_ref().unwrap(), stride, pad, &g)?;
                    per_layer[i].0 = Some(dw);
                    dx
                }
                LayerKind::Fc { .. } => {
                    let grads = fc_backward(x, params.weights.as_ref().unwrap(), params.bias.is_some(), &g)?;
                    per_layer[i].0 = Some(grads.weights);
                    per_layer[i].1 = grads.bias;
                    grads.input
                }
                LayerKind::MaxPool { .. } => {
                    maxpool_backward(x.shape(), cache.pool_indices.as_ref().unwrap(), &g)?
                }
            };
        }
        let mut params = Vec::new();
        for (w, b, bn) in per_layer {
            params.extend(w);
            params.extend(b);
            if let Some((s, t)) = bn {
                params.push(s);
                params.push(t);
            }
        }
        Ok(Gradients { params, input: g, captured })
    }

    /// Mean cross-entropy of a labelled batch and its gradients.
    pub fn loss_and_gradients(
        &self,
        images: &Tensor<T>,
        labels: &[usize],
        ctx: &OpContext,
    ) -> Result<(T, ForwardPass<T>, Gradients<T>)> {
        let pass = self.forward(images, ctx)?;
        let xent = softmax_xent(&pass.scores, labels)?;
        let grads = self.backward(&pass, &xent.grad, None)?;
        Ok((xent.loss, pass, grads))
    }

    /// Fold training-mode batch statistics into the BN running estimates.
    pub fn update_running_stats(&mut self, pass: &ForwardPass<T>) {
        if !pass.training {
            return;
        }
        for (params, cache) in self.layers.iter_mut().zip(&pass.caches) {
            if let (Some(bn), Some(bc)) = (params.bn.as_mut(), cache.bn.as_ref()) {
                bn.running.update(bc);
            }
        }
    }

    /// Inference-mode scores of a single image.
    pub fn class_scores(&self, image: &Tensor<T>) -> Result<ClassScores> {
        Ok(self.forward(image, &OpContext::inference())?.class_scores(0))
    }

    /// Inference-mode class probabilities, `N×K`.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(images, &OpContext::inference())?.probs)
    }
}

fn empty_params<T: Scalar>(spec: &LayerSpec) -> LayerParams<T> {
    let weights = match spec.kind {
        LayerKind::Conv { kernel, in_channels, out_channels, .. } => {
            Some(Tensor::zeros(vec![kernel, kernel, in_channels, out_channels]))
        }
        LayerKind::Fc { inputs, outputs } => Some(Tensor::zeros(vec![outputs, inputs])),
        LayerKind::MaxPool { .. } => None,
    };
    let c = spec.out_channels();
    LayerParams {
        weights,
        bias: c.filter(|_| spec.bias).map(|c| Tensor::zeros(vec![c])),
        bn: c.filter(|_| spec.batch_norm).map(|c| BatchNormParams {
            scale: Tensor::full(vec![c], T::one()),
            shift: Tensor::zeros(vec![c]),
            running: RunningStats::new(c),
        }),
    }
}
