//! Grad-CAM saliency and class-model visualization.
//!
//! Both differentiate the pre-softmax class score, never the probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::resample_placed;
use crate::model::{Network, NetworkSpec};
use crate::tensor::{OpContext, Scalar, Tensor};

/// Layer whose feature maps Grad-CAM uses by default.
pub const DEFAULT_LAYER: &str = "Conv4_2";

/// Per-feature-map importance of one layer for one class and image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCamWeights {
    pub class: usize,
    pub layer: String,
    /// Spatial positions the gradient was averaged over.
    pub domain: usize,
    pub weights: Vec<f64>,
}

/// Grad-CAM weights together with the feature maps they apply to.
#[derive(Debug, Clone)]
pub struct GradCam<T: Scalar = f32> {
    pub weights: GradCamWeights,
    /// `h×w×K` activations of the chosen layer.
    pub maps: Tensor<T>,
}

fn check_class<T: Scalar>(net: &Network<T>, class: usize) -> Result<()> {
    let classes = net.spec().classes;
    if class >= classes {
        return Err(Error::ClassOutOfRange { class, classes });
    }
    Ok(())
}

fn squeeze_maps<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    match *t.shape() {
        [1, h, w, k] => t.clone().reshape(vec![h, w, k]),
        [h, w, k] => t.clone().reshape(vec![h, w, k]),
        ref s => Err(Error::shape(format!("expected one image's feature maps, got {s:?}"))),
    }
}

/// Spatial mean of `∂S_c/∂A` for each map of the named layer, in inference mode.
pub fn gradcam_weights<T: Scalar>(net: &Network<T>, image: &Tensor<T>, class: usize, layer: &str) -> Result<GradCam<T>> {
    check_class(net, class)?;
    let index = net.spec().layer_index(layer)?;
    if image.rank() == 4 && image.batch() != 1 {
        return Err(Error::shape("Grad-CAM takes one image at a time"));
    }
    let pass = net.forward(image, &OpContext::inference())?;
    let mut onehot = Tensor::zeros(pass.scores.shape().to_vec());
    onehot.data_mut()[class] = T::one();
    let grads = net.backward(&pass, &onehot, Some(index))?;
    let maps = squeeze_maps(pass.layer_output(index))?;
    let grad = squeeze_maps(grads.captured.as_ref().expect("captured layer gradient"))?;
    let weights = GradCamWeights {
        class,
        layer: net.spec().layers[index].name.clone(),
        domain: grad.shape()[0] * grad.shape()[1],
        weights: spatial_mean(&grad)?,
    };
    Ok(GradCam { weights, maps })
}

/// Per-channel mean over the spatial positions of an `h×w×K` tensor.
pub fn spatial_mean<T: Scalar>(grad: &Tensor<T>) -> Result<Vec<f64>> {
    let [h, w, k] = *grad.shape() else {
        return Err(Error::shape(format!("expected h×w×K, got {:?}", grad.shape())));
    };
    let mut sums = vec![0.0f64; k];
    for (i, v) in grad.data().iter().enumerate() {
        sums[i % k] += v.as_f64();
    }
    Ok(sums.into_iter().map(|s| s / (h * w) as f64).collect())
}

/// `Σ_k α_k A^k` before rectification, `h×w`.
pub fn gradcam_pre_relu<T: Scalar>(maps: &Tensor<T>, weights: &[f64]) -> Result<Tensor<f64>> {
    let maps = squeeze_maps(maps)?;
    let [h, w, k] = *maps.shape() else { unreachable!() };
    if weights.len() != k {
        return Err(Error::shape(format!("{} weights for {k} feature maps", weights.len())));
    }
    let data = maps
        .data()
        .chunks_exact(k)
        .map(|px| px.iter().zip(weights).map(|(a, w)| a.as_f64() * w).sum())
        .collect();
    Tensor::new(vec![h, w], data)
}

/// Rectified weighted sum of feature maps, `h×w`.
pub fn gradcam_map<T: Scalar>(maps: &Tensor<T>, weights: &[f64]) -> Result<Tensor<f64>> {
    Ok(gradcam_pre_relu(maps, weights)?.map(|v| v.max(0.0)))
}

/// Resize a layer-resolution map to the network input, placing each cell at
/// the centre of its receptive field.
pub fn gradcam_upsample(spec: &NetworkSpec, layer: &str, map: &Tensor<f64>) -> Result<Tensor<f64>> {
    let geometry = spec.receptive_field_centres(spec.layer_index(layer)?)?;
    resample_placed(map, spec.input[0], spec.input[1], geometry, geometry)
}

/// Class-averaged Grad-CAM weights over a labeled image set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub class: usize,
    pub layer: String,
    /// Number of class-`class` images that contributed.
    pub count: usize,
    pub weights: Vec<f64>,
}

/// Mean of per-image weights over images whose label is `class`.
/// `per_image` pairs each image's label with its weights for `class`.
pub fn ensemble_weights(per_image: &[(usize, GradCamWeights)], class: usize) -> Result<EnsembleWeights> {
    let members: Vec<&GradCamWeights> = per_image.iter().filter(|(l, _)| *l == class).map(|(_, w)| w).collect();
    let Some(first) = members.first() else {
        return Err(Error::Insufficient(format!("no images of class {class} for ensemble weights")));
    };
    let k = first.weights.len();
    let mut sums = vec![0.0; k];
    for m in &members {
        if m.weights.len() != k || m.class != class {
            return Err(Error::shape("ensemble members must share class and map count"));
        }
        for (s, w) in sums.iter_mut().zip(&m.weights) {
            *s += w;
        }
    }
    let n = members.len() as f64;
    Ok(EnsembleWeights {
        class,
        layer: first.layer.clone(),
        count: members.len(),
        weights: sums.into_iter().map(|s| s / n).collect(),
    })
}

/// Five-point Laplacian with replicated borders on an `h×w` or `h×w×1` image.
pub fn laplacian<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = match *image.shape() {
        [h, w] | [h, w, 1] => (h, w),
        ref s => return Err(Error::shape(format!("laplacian needs a single-channel image, got {s:?}"))),
    };
    if h < 3 || w < 3 {
        return Err(Error::shape(format!("laplacian needs at least 3×3, got {h}×{w}")));
    }
    let src = image.data();
    let at = |y: usize, x: usize| src[y * w + x];
    let four = T::lit(4.0);
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let up = at(y.saturating_sub(1), x);
            let down = at((y + 1).min(h - 1), x);
            let left = at(y, x.saturating_sub(1));
            let right = at(y, (x + 1).min(w - 1));
            up + down + left + right - four * at(y, x)
        })
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Anything that can report a class score and its gradient with respect to the input.
pub trait ScoreGradient {
    fn input_extents(&self) -> [usize; 3];
    fn score_and_gradient(&self, image: &Tensor, class: usize) -> Result<(f64, Tensor)>;
}

impl ScoreGradient for Network {
    fn input_extents(&self) -> [usize; 3] {
        self.spec().input
    }

    fn score_and_gradient(&self, image: &Tensor, class: usize) -> Result<(f64, Tensor)> {
        check_class(self, class)?;
        let pass = self.forward(image, &OpContext::inference())?;
        let mut onehot = Tensor::zeros(pass.scores.shape().to_vec());
        onehot.data_mut()[class] = 1.0;
        let grads = self.backward(&pass, &onehot, None)?;
        let score = pass.scores.data()[class] as f64;
        Ok((score, grads.input.reshape(image.shape().to_vec())?))
    }
}

/// Frozen linear scorer `S_c = ⟨w_c, I⟩`.
#[derive(Debug, Clone)]
pub struct LinearScorer {
    pub weights: Vec<Tensor>,
}

impl ScoreGradient for LinearScorer {
    fn input_extents(&self) -> [usize; 3] {
        let s = self.weights[0].shape();
        [s[0], s[1], s[2]]
    }

    fn score_and_gradient(&self, image: &Tensor, class: usize) -> Result<(f64, Tensor)> {
        let w = self
            .weights
            .get(class)
            .ok_or(Error::ClassOutOfRange { class, classes: self.weights.len() })?;
        Ok((w.dot(image)? as f64, w.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingSign {
    /// `I ← I + ε(∂S/∂I − λ1·I − λ2·∇²I)`, as published.
    Published,
    /// `+λ2·∇²I`, the gradient-descent step on a `½‖∇I‖²` penalty.
    Descent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassModelInit {
    Zeros,
    /// Start from an image (e.g. one of the opposing class).
    Image(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModelConfig {
    pub step: f64,
    pub l2_penalty: f64,
    pub smoothness_penalty: f64,
    pub iterations: usize,
    pub init: ClassModelInit,
    pub smoothing_sign: SmoothingSign,
    /// Keep a copy of the image every this many iterations (0: none).
    pub snapshot_every: usize,
}

impl Default for ClassModelConfig {
    fn default() -> Self {
        Self {
            step: 10.0,
            l2_penalty: 0.01,
            smoothness_penalty: 0.001,
            iterations: 500,
            init: ClassModelInit::Zeros,
            smoothing_sign: SmoothingSign::Published,
            snapshot_every: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassModel {
    pub image: Tensor,
    /// `(iteration, image)` pairs; iteration counts completed updates.
    pub snapshots: Vec<(usize, Tensor)>,
    /// Class score before each update.
    pub scores: Vec<f64>,
}

/// Regularized gradient ascent on a class score.
pub fn class_model(scorer: &impl ScoreGradient, class: usize, cfg: &ClassModelConfig) -> Result<ClassModel> {
    if !(cfg.step > 0.0) || cfg.iterations == 0 {
        return Err(Error::invalid("class model needs a positive step and at least one iteration"));
    }
    let [h, w, c] = scorer.input_extents();
    if c != 1 {
        return Err(Error::shape("class models are built for single-channel inputs"));
    }
    let mut image = match &cfg.init {
        ClassModelInit::Zeros => Tensor::zeros(vec![h, w, 1]),
        ClassModelInit::Image(px) => Tensor::new(vec![h, w, 1], px.clone())?,
    };
    let sign = match cfg.smoothing_sign {
        SmoothingSign::Published => -1.0,
        SmoothingSign::Descent => 1.0,
    };
    let mut snapshots = Vec::new();
    let mut scores = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (score, grad) = scorer.score_and_gradient(&image, class)?;
        scores.push(score);
        let lap = laplacian(&image)?;
        let (eps, l1, l2) = (cfg.step, cfg.l2_penalty, cfg.smoothness_penalty);
        for ((px, &g), &l) in image.data_mut().iter_mut().zip(grad.data()).zip(lap.data()) {
            let v = *px as f64;
            *px = (v + eps * (g as f64 - l1 * v + sign * l2 * l as f64)) as f32;
        }
        image
            .check_finite("class model image")
            .map_err(|e| Error::Diverged { iteration: it as u64 + 1, detail: e.to_string() })?;
        if cfg.snapshot_every > 0 && (it + 1) % cfg.snapshot_every == 0 {
            snapshots.push((it + 1, image.clone()));
        }
    }
    Ok(ClassModel { image, snapshots, scores })
}

/// Min-max rescale to `[0, 1]` for display; constant images map to 0.5.
pub fn display_normalize(image: &Tensor) -> Tensor {
    let (lo, hi) = (image.min_value(), image.max_value());
    if hi > lo {
        image.map(|v| (v - lo) / (hi - lo))
    } else {
        image.map(|_| 0.5)
    }
}
