use gradcore::{Adam, AdamConfig, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DenoiserModel, ForwardOptions};
use crate::diffusion::{train_alphas_bar, TRAIN_STEPS};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 1,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Mean loss over the first tenth of training.
    pub initial_smoothed: f64,
    /// Mean loss over the last tenth of training.
    pub final_smoothed: f64,
}

impl TrainReport {
    fn from_losses(losses: Vec<f64>) -> Self {
        let w = (losses.len() / 10).max(1).min(losses.len().max(1));
        let mean = |s: &[f64]| if s.is_empty() { 0.0 } else { s.iter().sum::<f64>() / s.len() as f64 };
        TrainReport {
            initial_smoothed: mean(&losses[..w.min(losses.len())]),
            final_smoothed: mean(&losses[losses.len().saturating_sub(w)..]),
            losses,
        }
    }

    /// `1 − final/initial`.
    pub fn reduction(&self) -> f64 {
        1.0 - self.final_smoothed / self.initial_smoothed
    }
}

/// Noise-prediction training: minimizes `‖ε − ε_θ(√ᾱ x₀ + √(1−ᾱ) ε, t)‖²`.
pub fn train(model: &DenoiserModel, dataset: &[Image], cfg: &TrainConfig) -> Result<(DenoiserModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let shape = model.config().latent_shape();
    if let Some(bad) = dataset.iter().find(|im| im.tensor().shape() != shape) {
        return Err(Error::config(format!(
            "dataset image {:?} does not match model input {shape:?}",
            bad.tensor().shape()
        )));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("batch_size ≥ 1 and lr > 0 are required"));
    }
    let alphas = train_alphas_bar(TRAIN_STEPS);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::<f32>::new(AdamConfig::with_lr(cfg.lr));
    let mut current = model.clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let tape = Tape::<f32>::new();
        let bound = current.bind(&tape, true);
        let mut terms = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let x0 = dataset[rng.gen_range(0..dataset.len())].tensor();
            let t = rng.gen_range(0..TRAIN_STEPS);
            let eps = Tensor::<f32>::randn(&shape, &mut rng);
            let (a, b) = (alphas[t].sqrt() as f32, (1.0 - alphas[t]).sqrt() as f32);
            let xt = x0.zip_map(&eps, "noise", |x, e| a * x + b * e)?;
            let out = bound.forward(tape.constant(xt), t, &ForwardOptions::default(), None)?;
            terms.push(out.eps.expect("full pass").mse_mean(tape.constant(eps))?);
        }
        let mut loss = terms[0];
        for t in &terms[1..] {
            loss = loss.add(*t)?;
        }
        if cfg.batch_size > 1 {
            loss = loss.scale(1.0 / cfg.batch_size as f32)?;
        }
        let value = loss.value().item()? as f64;
        if !value.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        let grads = tape.backward(loss).map_err(|_| Error::TrainingDiverged { step })?;
        let names: Vec<&str> = bound.vars().keys().copied().collect();
        let params: Vec<Tensor<f32>> = names.iter().map(|n| bound.vars()[n].value().as_ref().clone()).collect();
        let grad_list: Vec<Tensor<f32>> = names.iter().map(|n| grads.wrt(bound.vars()[n])).collect();
        let updated = adam
            .step(names.iter().zip(&params).zip(&grad_list).map(|((n, p), g)| (*n, p, g)))
            .map_err(|_| Error::TrainingDiverged { step })?;
        let next = names.iter().map(|n| n.to_string()).zip(updated).collect();
        drop(bound);
        current.set_params(next, 0);
        losses.push(value);
    }
    current.set_params(current.params().clone(), cfg.steps as u64);
    Ok((current, TrainReport::from_losses(losses)))
}
