//! Mini-batch training with Adam and binary cross-entropy.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{random_oversample, DataError, Dataset, Label};
use crate::model::{forward, predict_proba, rope_table, ModelError, ModelParameters, RetformerConfig};
use crate::numerics::{Graph, Tensor};
use crate::rng::{rng_for, substream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set must contain both classes, got counts HC={hc}, AD={ad}")]
    SingleClass { hc: usize, ad: usize },
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Balance classes by redrawing minority-class training samples.
    pub oversample: bool,
    /// Record wall-clock seconds per epoch in the log.
    pub record_timings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 250,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            oversample: true,
            record_timings: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(TrainError::Config("learning_rate and epsilon must be positive, betas in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// `epoch,loss,accuracy,seconds`; the seconds column is empty unless timings were recorded.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy,seconds\n");
        for r in &self.epochs {
            let secs = r.seconds.map(|s| format!("{s:.3}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.10},{:.10},{}", r.epoch, r.loss, r.accuracy, secs);
        }
        out
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.accuracy)
    }
}

/// `-[y ln p + (1-y) ln(1-p)]` with `p` clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean [`bce_loss`] over a batch.
pub fn bce_mean(probs: &[f64], targets: &[f64]) -> f64 {
    probs.iter().zip(targets).map(|(&p, &y)| bce_loss(p, y)).sum::<f64>() / probs.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moment estimates, one tensor per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self { step: 0, m: shapes.iter().map(|s| Tensor::zeros(s)).collect(), v: shapes.iter().map(|s| Tensor::zeros(s)).collect() }
    }

    pub fn for_params(params: &ModelParameters<f64>) -> Self {
        let shapes: Vec<&[usize]> = params.leaves().into_iter().map(|t| t.shape()).collect();
        Self::new(&shapes)
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// `names[i]` labels `params[i]` in error messages.
pub fn adam_step_tensors(
    params: &mut [&mut Tensor<f64>],
    grads: &[Tensor<f64>],
    names: &[String],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), TrainError> {
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(TrainError::NonFiniteGradient(names.get(i).cloned().unwrap_or_else(|| format!("tensor {i}"))));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = hyper.beta1 * *mv + (1.0 - hyper.beta1) * gv;
            *vv = hyper.beta2 * *vv + (1.0 - hyper.beta2) * gv * gv;
            *pv -= hyper.learning_rate * (*mv / c1) / ((*vv / c2).sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}

pub fn adam_step(params: &mut ModelParameters<f64>, grads: &[Tensor<f64>], state: &mut AdamState, hyper: &AdamHyper) -> Result<(), TrainError> {
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut leaves = params.leaves_mut();
    adam_step_tensors(&mut leaves, grads, &names, state, hyper)
}

/// Loss, gradients and correct-prediction count of one forward/backward pass.
#[derive(Clone, Debug)]
pub struct BatchResult {
    /// Mean binary cross-entropy.
    pub loss: f64,
    /// One gradient per parameter tensor, in [`ModelParameters::leaves`] order.
    pub grads: Vec<Tensor<f64>>,
    pub correct: usize,
}

/// Images per autodiff graph; fixed so results do not depend on the thread count.
const CHUNK: usize = 16;

fn chunk_gradients(params: &ModelParameters<f64>, config: &RetformerConfig, images: &[&Tensor<f64>], targets: &[f64]) -> Result<BatchResult, TrainError> {
    let rope = rope_table(config)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let trace = forward(&mut g, images, &bound, config, &rope)?;
    let loss = g.bce_with_logits(trace.logits, targets).map_err(ModelError::from)?;
    let correct = g.value(trace.logits).data().iter().zip(targets).filter(|(&z, &y)| (z >= 0.0) == (y >= 0.5)).count();
    let mut grads = g.backward(loss).map_err(ModelError::from)?;
    let grads = bound.leaves().into_iter().map(|&id| grads.take(id)).collect();
    Ok(BatchResult { loss: g.value(loss).data()[0], grads, correct })
}

/// Mean loss and its gradient over `images`, evaluated in parallel chunks.
pub fn loss_and_gradients(params: &ModelParameters<f64>, config: &RetformerConfig, images: &[&Tensor<f64>], targets: &[f64]) -> Result<BatchResult, TrainError> {
    let n = images.len() as f64;
    let parts: Vec<(usize, BatchResult)> = images
        .par_chunks(CHUNK)
        .zip(targets.par_chunks(CHUNK))
        .map(|(im, ta)| chunk_gradients(params, config, im, ta).map(|r| (im.len(), r)))
        .collect::<Result<_, _>>()?;
    let mut iter = parts.into_iter();
    let (len0, mut total) = iter.next().ok_or_else(|| TrainError::Config("empty batch".into()))?;
    let w0 = len0 as f64 / n;
    total.loss *= w0;
    total.grads.iter_mut().for_each(|g| *g = g.scale(w0));
    for (len, part) in iter {
        let w = len as f64 / n;
        total.loss += w * part.loss;
        total.correct += part.correct;
        for (acc, g) in total.grads.iter_mut().zip(&part.grads) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += w * b);
        }
    }
    Ok(total)
}

/// Index batches presented in `epoch`: a seeded shuffle of `indices`, cut into
/// `batch_size` pieces with the last partial batch kept.
pub fn epoch_batches(indices: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(&mut rng_for(seed, "epoch-shuffle", epoch as u64));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Indices presented each epoch: all samples, plus minority redraws when oversampling.
pub fn training_indices(dataset: &Dataset, config: &TrainConfig) -> Result<Vec<usize>, TrainError> {
    let [hc, ad] = dataset.class_counts();
    if hc == 0 || ad == 0 {
        return Err(TrainError::SingleClass { hc, ad });
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    Ok(if config.oversample { random_oversample(&all, &dataset.labels(), substream(config.seed, "oversample", 0))? } else { all })
}

/// Trains freshly initialized parameters on every sample of `dataset`.
pub fn train_model(dataset: &Dataset, model: &RetformerConfig, config: &TrainConfig) -> Result<(ModelParameters<f64>, TrainLog), TrainError> {
    let params = ModelParameters::init(model, &mut rng_for(config.seed, "init", 0))?;
    train_from(params, dataset, model, config)
}

/// Continues training `params` on `dataset`.
pub fn train_from(
    mut params: ModelParameters<f64>,
    dataset: &Dataset,
    model: &RetformerConfig,
    config: &TrainConfig,
) -> Result<(ModelParameters<f64>, TrainLog), TrainError> {
    config.validate()?;
    model.validate()?;
    let indices = training_indices(dataset, config)?;
    let hyper = config.adam();
    let mut state = AdamState::for_params(&params);
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for (b, batch) in epoch_batches(&indices, config.batch_size, config.seed, epoch).iter().enumerate() {
            let images: Vec<&Tensor<f64>> = batch.iter().map(|&i| &dataset.samples[i].pixels).collect();
            let targets: Vec<f64> = batch.iter().map(|&i| dataset.samples[i].label.target()).collect();
            let result = loss_and_gradients(&params, model, &images, &targets)?;
            if !result.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += result.loss * batch.len() as f64;
            correct += result.correct;
            seen += batch.len();
            adam_step(&mut params, &result.grads, &mut state, &hyper)?;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            seconds: config.record_timings.then(|| started.elapsed().as_secs_f64()),
        };
        log::debug!("epoch {} loss {:.5} accuracy {:.4}", record.epoch, record.loss, record.accuracy);
        log.epochs.push(record);
    }
    Ok((params, log))
}

/// Predicted `P(AD)` and true label for every sample, in dataset order.
pub fn predict_scores(params: &ModelParameters<f64>, model: &RetformerConfig, dataset: &Dataset) -> Result<Vec<(f64, Label)>, TrainError> {
    if dataset.is_empty() {
        return Ok(Vec::new());
    }
    let probs = predict_proba(&dataset.images(), params, model, CHUNK)?;
    Ok(probs.into_iter().zip(dataset.samples.iter().map(|s| s.label)).collect())
}

/// Fraction of samples whose thresholded score (`≥ 0.5` means AD) matches the label.
pub fn accuracy(scores: &[(f64, Label)]) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    scores.iter().filter(|(p, l)| (*p >= 0.5) == (*l == Label::Ad)).count() as f64 / scores.len() as f64
}
