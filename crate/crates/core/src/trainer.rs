//! Mini-batch SGD with Nesterov momentum, inverse learning-rate decay and
//! L2 decay on conv/fc weights.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{center_crop, crop, variance_normalize};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{softmax_xent, OpContext, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iterations: u64,
    /// Inverse schedule: `lr = base_lr · (1 + lr_gamma · iter)^(−lr_power)`.
    pub lr_gamma: f64,
    pub lr_power: f64,
    /// Evaluate on the validation set every this many iterations (0: only at the end).
    pub eval_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 20,
            max_iterations: 3000,
            lr_gamma: 1e-4,
            lr_power: 0.75,
            eval_interval: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!("base learning rate {} must be positive", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2 for batch normalization"));
        }
        if !(self.weight_decay >= 0.0 && self.lr_gamma >= 0.0 && self.lr_power >= 0.0) {
            return Err(Error::invalid("decay and schedule constants must be non-negative"));
        }
        Ok(())
    }
}

pub fn inv_lr(iteration: u64, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * (1.0 + cfg.lr_gamma * iteration as f64).powf(-cfg.lr_power)
}

/// One Nesterov update of a parameter tensor in place.
///
/// With `g' = g + decay · w`: `v ← μv − lr·g'`, then `w ← w + μv − lr·g'`.
/// Pass `decay = 0` for tensors exempt from weight decay.
pub fn nesterov_step<T: Scalar>(
    params: &mut Tensor<T>,
    grads: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: f64,
    momentum: f64,
    decay: f64,
) -> Result<()> {
    params.expect_same_shape(grads, "nesterov_step")?;
    params.expect_same_shape(velocity, "nesterov_step")?;
    let (lr, mu, decay) = (T::lit(lr), T::lit(momentum), T::lit(decay));
    for ((w, &g), v) in params.data_mut().iter_mut().zip(grads.data()).zip(velocity.data_mut()) {
        let g = if decay != T::zero() { g + decay * *w } else { g };
        *v = mu * *v - lr * g;
        *w = *w + mu * *v - lr * g;
    }
    params.check_finite("parameters after update")?;
    velocity.check_finite("velocity after update")
}

/// A training or evaluation image. Images may exceed the network input;
/// training takes random crops and evaluation the center crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EvalRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: EvalRecord) -> Result<()> {
        if self.records.last().is_some_and(|last| last.iteration >= r.iteration) {
            return Err(Error::invalid("train log iterations must increase"));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,train_loss,val_loss,val_acc\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{}", r.iteration, r.train_loss, r.val_loss, r.val_acc);
        }
        out
    }
}

/// One inference-mode classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub p_sick: f64,
}

impl Classification {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub items: Vec<Classification>,
}

/// Center-cropped, variance-normalized network input for an image.
pub fn eval_input(net: &Network, image: &Tensor) -> Result<Tensor> {
    let [h, w, _] = net.spec().input;
    variance_normalize(&center_crop(image, h, w)?)
}

const EVAL_CHUNK: usize = 50;

/// Inference-mode accuracy, mean cross-entropy and per-image results.
pub fn evaluate(net: &Network, samples: &[Sample]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Ok(Evaluation { accuracy: 0.0, loss: 0.0, items: Vec::new() });
    }
    let mut items = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let inputs = chunk.iter().map(|s| eval_input(net, &s.image)).collect::<Result<Vec<_>>>()?;
        let pass = net.forward(&Tensor::stack(&inputs)?, &OpContext::inference())?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        loss += softmax_xent(&pass.scores, &labels)?.loss as f64 * chunk.len() as f64;
        let k = pass.probs.shape()[1];
        for (i, s) in chunk.iter().enumerate() {
            let row = &pass.probs.data()[i * k..(i + 1) * k];
            let predicted = Tensor::new(vec![k], row.to_vec())?.argmax();
            items.push(Classification {
                id: s.id.clone(),
                label: s.label,
                predicted,
                p_sick: row.get(1).copied().unwrap_or(0.0) as f64,
            });
        }
    }
    let correct = items.iter().filter(|c| c.correct()).count();
    Ok(Evaluation { accuracy: correct as f64 / items.len() as f64, loss: loss / samples.len() as f64, items })
}

/// Mutable training state: network, momentum buffers and iteration counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub network: Network,
    velocity: Vec<Tensor>,
    pub iteration: u64,
    cfg: TrainConfig,
}

impl Trainer {
    pub fn new(network: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let velocity = network.parameters().iter().map(|(_, _, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Ok(Self { network, velocity, iteration: 0, cfg })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Forward, backward and update on one prepared batch; returns the batch loss.
    pub fn step(&mut self, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
        let ctx = OpContext::training(derive_seed(self.cfg.seed, &[0xd0, self.iteration]));
        let (loss, pass, grads) = self.network.loss_and_gradients(inputs, labels, &ctx)?;
        let loss = loss as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: self.iteration, detail: format!("loss is {loss}") });
        }
        self.network.update_running_stats(&pass);
        self.apply(&grads.params)?;
        Ok(loss)
    }

    /// Update every parameter from data gradients (in [`Network::parameters`]
    /// order) at the current iteration's learning rate, then advance the counter.
    pub fn apply(&mut self, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::shape(format!("{} gradients for {} parameter tensors", grads.len(), self.velocity.len())));
        }
        let lr = inv_lr(self.iteration, &self.cfg);
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        let iteration = self.iteration;
        for (((_, kind, w), g), v) in self.network.parameters_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            let decay = if kind.decays() { wd } else { 0.0 };
            nesterov_step(w, g, v, lr, mu, decay).map_err(|e| Error::Diverged { iteration, detail: e.to_string() })?;
        }
        self.iteration += 1;
        Ok(())
    }
}

fn random_crop_input(net: &Network, image: &Tensor, seed: u64) -> Result<Tensor> {
    let [h, w, _] = net.spec().input;
    let (ih, iw) = (image.shape()[0], image.shape()[1]);
    if ih < h || iw < w {
        return Err(Error::shape(format!("training image {ih}×{iw} smaller than network input {h}×{w}")));
    }
    let mut rng = rng_for(seed, &[0xc0]);
    let top = rng.random_range(0..=ih - h);
    let left = rng.random_range(0..=iw - w);
    variance_normalize(&crop(image, top, left, h, w)?)
}

/// Run the full training loop. `on_eval` sees each log record as it is made.
pub fn train_with(
    network: Network,
    train: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(&EvalRecord),
) -> Result<(Network, TrainLog)> {
    cfg.validate()?;
    let classes = network.spec().classes;
    for c in 0..classes {
        if !train.iter().any(|s| s.label == c) {
            return Err(Error::Insufficient(format!("training set has no images of class {c}")));
        }
    }
    if let Some(s) = train.iter().chain(validation).find(|s| s.label >= classes) {
        return Err(Error::ClassOutOfRange { class: s.label, classes });
    }
    let mut trainer = Trainer::new(network, cfg.clone())?;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    while trainer.iteration < cfg.max_iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng_for(cfg.seed, &[0xe0, epoch]));
                epoch += 1;
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let it = trainer.iteration;
        let inputs = batch
            .iter()
            .enumerate()
            .map(|(slot, &i)| random_crop_input(&trainer.network, &train[i].image, derive_seed(cfg.seed, &[it, slot as u64])))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
        loss_sum += trainer.step(&Tensor::stack(&inputs)?, &labels)?;
        loss_count += 1;
        let done = trainer.iteration == cfg.max_iterations;
        if done || (cfg.eval_interval > 0 && trainer.iteration % cfg.eval_interval == 0) {
            let eval = evaluate(&trainer.network, validation)?;
            let rec = EvalRecord {
                iteration: trainer.iteration,
                train_loss: loss_sum / loss_count as f64,
                val_loss: eval.loss,
                val_acc: eval.accuracy,
            };
            on_eval(&rec);
            log.push(rec)?;
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    Ok((trainer.network, log))
}

pub fn train(network: Network, train: &[Sample], validation: &[Sample], cfg: &TrainConfig) -> Result<(Network, TrainLog)> {
    train_with(network, train, validation, cfg, |_| {})
}
