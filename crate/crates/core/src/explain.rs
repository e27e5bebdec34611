//! Grad-CAM and attention heatmaps, heatmap-guided masking, and the
//! Grad-CAM-versus-random masking study.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{kfold, resize_bilinear, write_png, DataError, Dataset, Grouping, ImageSample, Label};
use crate::metrics::{mean_std, two_sample_t_test, MetricsError, TTest};
use crate::model::{forward, model_forward, rope_table, ModelError, ModelParameters, RetformerConfig};
use crate::numerics::{Graph, NumericsError, Tensor};
use crate::rng::{rng_for, substream};
use crate::train::{accuracy, predict_scores, train_model, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("the final layer has no attention to visualize")]
    NoAttention,
    #[error("keep fraction must lie in (0, 1], got {0}")]
    KeepFraction(f64),
    #[error("layer {index} does not exist (model has {layers})")]
    NoSuchLayer { index: usize, layers: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// A saliency map with values in `[0, 1]`, shaped `[H, W, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Tensor<f64>,
    /// Map before min-max normalization (non-negative).
    pub raw: Tensor<f64>,
    /// The raw map was zero everywhere.
    pub degenerate: bool,
}

impl Heatmap {
    /// Min-max normalizes a non-negative `[H, W, 1]` map. A constant positive
    /// map becomes all ones; an all-zero map is flagged as degenerate.
    pub fn from_raw(raw: Tensor<f64>) -> Self {
        let max = raw.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = raw.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let (values, degenerate) = if !(max > 0.0) {
            (Tensor::zeros(raw.shape()), true)
        } else if max - min <= 1e-12 * max {
            (Tensor::ones(raw.shape()), false)
        } else {
            (raw.map(|v| (v - min) / (max - min)), false)
        };
        Self { values, raw, degenerate }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Row-per-line CSV of the normalized values.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for y in 0..self.height() {
            let row: Vec<String> = (0..self.width()).map(|x| format!("{:.6}", self.values.get(&[y, x, 0]))).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ExplainError> {
        Ok(write_png(path, &self.values)?)
    }
}

/// Layer whose output feeds Grad-CAM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CamTarget {
    /// Output of the last layer normalization.
    #[default]
    LastNorm,
    /// Output of transformer layer `i`.
    LayerOutput(usize),
    /// Patch embedding (plus learned positions when present).
    Embedding,
}

/// Grad-CAM from token activations `A: [.., N, C]` and `∂score/∂A` of the
/// same shape, on a `side × side` patch grid.
pub fn cam_from_activations(activations: &Tensor<f64>, gradient: &Tensor<f64>, side: usize) -> Result<Heatmap, ExplainError> {
    let c = activations.last_dim();
    let n = side * side;
    if activations.len() != n * c || gradient.shape() != activations.shape() {
        return Err(ExplainError::Shape(format!(
            "activations {:?} and gradient {:?} do not fit a {side}×{side} grid",
            activations.shape(),
            gradient.shape()
        )));
    }
    let (a, g) = (activations.data(), gradient.data());
    let mut alpha = vec![0.0; c];
    for t in 0..n {
        for (w, &d) in alpha.iter_mut().zip(&g[t * c..(t + 1) * c]) {
            *w += d / n as f64;
        }
    }
    let raw: Vec<f64> = (0..n)
        .map(|t| a[t * c..(t + 1) * c].iter().zip(&alpha).map(|(x, w)| x * w).sum::<f64>().max(0.0))
        .collect();
    Ok(Heatmap::from_raw(Tensor::new(vec![side, side, 1], raw)?))
}

/// Grad-CAM on the patch grid for `class` (AD uses the logit, HC its negation).
pub fn grad_cam(
    params: &ModelParameters<f64>,
    config: &RetformerConfig,
    image: &Tensor<f64>,
    class: Label,
    target: CamTarget,
) -> Result<Heatmap, ExplainError> {
    let rope = rope_table::<f64>(config)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let trace = forward(&mut g, &[image], &bound, config, &rope)?;
    let node = match target {
        CamTarget::LastNorm => trace.last_norm(),
        CamTarget::Embedding => trace.embedded,
        CamTarget::LayerOutput(index) => {
            trace.layers.get(index).ok_or(ExplainError::NoSuchLayer { index, layers: trace.layers.len() })?.output
        }
    };
    let score = match class {
        Label::Ad => trace.logits,
        Label::Hc => g.scale(trace.logits, -1.0),
    };
    let root = g.sum(score);
    let grads = g.backward(root)?;
    cam_from_activations(g.value(node), &grads.get(node), config.grid_side())
}

/// Received attention per token: heads are averaged, then each column of the
/// `[N, N]` matrix is averaged over query rows.
pub fn attention_map(head_weights: &[Tensor<f64>], side: usize) -> Result<Heatmap, ExplainError> {
    let n = side * side;
    if head_weights.is_empty() || head_weights.iter().any(|w| w.len() != n * n) {
        return Err(ExplainError::Shape(format!("attention weights do not match {n} tokens")));
    }
    let scale = 1.0 / (head_weights.len() * n) as f64;
    let mut received = vec![0.0; n];
    for w in head_weights {
        for (i, &v) in w.data().iter().enumerate() {
            received[i % n] += v * scale;
        }
    }
    Ok(Heatmap::from_raw(Tensor::new(vec![side, side, 1], received)?))
}

/// Mean attention of the final layer over all heads.
pub fn mean_attention(params: &ModelParameters<f64>, config: &RetformerConfig, image: &Tensor<f64>) -> Result<Heatmap, ExplainError> {
    let rope = rope_table::<f64>(config)?;
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let trace = forward(&mut g, &[image], &bound, config, &rope)?;
    let last = trace.layers.last().ok_or(ExplainError::NoAttention)?;
    if last.attention_weights.is_empty() {
        return Err(ExplainError::NoAttention);
    }
    let weights: Vec<Tensor<f64>> = last.attention_weights.iter().map(|&w| g.value(w).clone()).collect();
    attention_map(&weights, config.grid_side())
}

/// Bilinear resize of a heatmap to `size × size`.
pub fn upsample_heatmap(heatmap: &Heatmap, size: usize) -> Heatmap {
    Heatmap {
        values: resize_bilinear(&heatmap.values, size, size).map(|v| v.clamp(0.0, 1.0)),
        raw: resize_bilinear(&heatmap.raw, size, size),
        degenerate: heatmap.degenerate,
    }
}

fn crop(t: &Tensor<f64>, size: usize) -> Tensor<f64> {
    let s = t.shape();
    let (w, c) = (s[1], s[2]);
    Tensor::from_fn(&[size, size, c], |i| {
        let (y, rest) = (i / (size * c), i % (size * c));
        t.data()[y * w * c + rest]
    })
}

/// Maps a patch-grid heatmap onto the unpadded input image.
pub fn heatmap_for_image(grid: &Heatmap, config: &RetformerConfig) -> Heatmap {
    let padded = upsample_heatmap(grid, config.padded_size());
    if config.padded_size() == config.image_size {
        return padded;
    }
    Heatmap {
        values: crop(&padded.values, config.image_size),
        raw: crop(&padded.raw, config.image_size),
        degenerate: padded.degenerate,
    }
}

/// `round(keep_fraction · pixels)`.
pub fn kept_pixel_count(pixels: usize, keep_fraction: f64) -> usize {
    (keep_fraction * pixels as f64).round() as usize
}

fn check_keep(keep_fraction: f64) -> Result<(), ExplainError> {
    if keep_fraction > 0.0 && keep_fraction <= 1.0 {
        Ok(())
    } else {
        Err(ExplainError::KeepFraction(keep_fraction))
    }
}

/// Pixels with the highest heat, ties broken by raster order.
pub fn top_pixels(heat: &[f64], count: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..heat.len()).collect();
    order.sort_by(|&a, &b| heat[b].total_cmp(&heat[a]));
    let mut keep = vec![false; heat.len()];
    order.iter().take(count).for_each(|&i| keep[i] = true);
    keep
}

/// Zeroes every channel of the pixels not kept.
pub fn mask_image(image: &Tensor<f64>, keep: &[bool]) -> Tensor<f64> {
    let c = image.last_dim();
    Tensor::from_fn(image.shape(), |i| if keep[i / c] { image.data()[i] } else { 0.0 })
}

/// Keeps the top `keep_fraction` of pixels by heat; the heatmap is resized
/// to the image first when needed.
pub fn apply_mask(image: &Tensor<f64>, heatmap: &Heatmap, keep_fraction: f64) -> Result<Tensor<f64>, ExplainError> {
    check_keep(keep_fraction)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h != w && (heatmap.height(), heatmap.width()) != (h, w) {
        return Err(ExplainError::Shape(format!("heatmap {:?} does not fit image {:?}", heatmap.values.shape(), image.shape())));
    }
    let heat = if (heatmap.height(), heatmap.width()) == (h, w) { heatmap.clone() } else { upsample_heatmap(heatmap, h) };
    Ok(mask_image(image, &top_pixels(heat.values.data(), kept_pixel_count(h * w, keep_fraction))))
}

/// Keeps a uniformly random pixel subset of the size [`apply_mask`] keeps.
pub fn random_mask(image: &Tensor<f64>, keep_fraction: f64, seed: u64) -> Result<Tensor<f64>, ExplainError> {
    check_keep(keep_fraction)?;
    let pixels = image.shape()[0] * image.shape()[1];
    let mut keep = vec![false; pixels];
    for i in sample(&mut rng_for(seed, "random-mask", 0), pixels, kept_pixel_count(pixels, keep_fraction)) {
        keep[i] = true;
    }
    Ok(mask_image(image, &keep))
}

fn colormap(h: f64) -> [f64; 3] {
    let band = |c: f64| (1.5 - (4.0 * h - c).abs()).clamp(0.0, 1.0);
    [band(3.0), band(2.0), band(1.0)]
}

/// RGB blend of the grayscale image and a colour-mapped heatmap.
pub fn overlay(image: &Tensor<f64>, heatmap: &Heatmap, opacity: f64) -> Result<Tensor<f64>, ExplainError> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.last_dim());
    let heat = if (heatmap.height(), heatmap.width()) == (h, w) { heatmap.clone() } else { upsample_heatmap(heatmap, h) };
    let mut out = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        let gray = image.data()[p * c..(p + 1) * c].iter().sum::<f64>() / c as f64;
        for v in colormap(heat.values.data()[p]) {
            out.push((1.0 - opacity) * gray + opacity * v);
        }
    }
    Ok(Tensor::new(vec![h, w, 3], out)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingOptions {
    pub k1: usize,
    pub k2: usize,
    pub repetitions: usize,
    pub keep_fraction: f64,
    pub alpha: f64,
    pub seed: u64,
    pub group_by_subject: bool,
    /// Feature map the Grad-CAM masks are computed from.
    pub target: CamTarget,
}

impl Default for MaskingOptions {
    fn default() -> Self {
        Self {
            k1: 2,
            k2: 2,
            repetitions: 25,
            keep_fraction: 0.3,
            alpha: 0.025,
            seed: 0,
            group_by_subject: false,
            target: CamTarget::LastNorm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionAccuracy {
    pub repetition: usize,
    pub original: f64,
    pub gradcam: f64,
    pub random: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingReport {
    pub options: MaskingOptions,
    pub repetitions: Vec<RepetitionAccuracy>,
    pub orig_vs_gradcam: TTest,
    pub gradcam_vs_random: TTest,
}

impl MaskingReport {
    pub fn acc_original(&self) -> Vec<f64> {
        self.repetitions.iter().map(|r| r.original).collect()
    }

    pub fn acc_gradcam(&self) -> Vec<f64> {
        self.repetitions.iter().map(|r| r.gradcam).collect()
    }

    pub fn acc_random(&self) -> Vec<f64> {
        self.repetitions.iter().map(|r| r.random).collect()
    }

    pub fn p_orig_vs_gradcam(&self) -> f64 {
        self.orig_vs_gradcam.p
    }

    pub fn p_gradcam_vs_random(&self) -> f64 {
        self.gradcam_vs_random.p
    }

    /// `repetition,acc_original,acc_gradcam_masked,acc_random_masked`.
    pub fn repetitions_csv(&self) -> String {
        let mut out = String::from("repetition,acc_original,acc_gradcam_masked,acc_random_masked\n");
        for r in &self.repetitions {
            let _ = writeln!(out, "{},{:.10},{:.10},{:.10}", r.repetition, r.original, r.gradcam, r.random);
        }
        out
    }

    /// `comparison,mean_a,std_a,mean_b,std_b,t,p,significant`.
    pub fn tests_csv(&self) -> String {
        let mut out = String::from("comparison,mean_a,std_a,mean_b,std_b,t,p,significant\n");
        let rows = [
            ("original_vs_gradcam", self.acc_original(), self.acc_gradcam(), &self.orig_vs_gradcam),
            ("gradcam_vs_random", self.acc_gradcam(), self.acc_random(), &self.gradcam_vs_random),
        ];
        for (name, a, b, t) in rows {
            let ((ma, sa), (mb, sb)) = (mean_std(&a), mean_std(&b));
            let _ = writeln!(
                out,
                "{name},{ma:.10},{sa:.10},{mb:.10},{sb:.10},{:.10},{:.10},{}",
                t.t,
                t.p,
                t.p < self.options.alpha
            );
        }
        out
    }
}

/// Two-sample pooled t-test where two constant samples with different means
/// count as infinitely significant.
fn compare(a: &[f64], b: &[f64]) -> Result<TTest, ExplainError> {
    match two_sample_t_test(a, b, true) {
        Err(MetricsError::InvalidInput(_)) if a.len() >= 2 && b.len() >= 2 => {
            let t = if a[0] > b[0] { f64::INFINITY } else { f64::NEG_INFINITY };
            Ok(TTest { t, p: 0.0, df: (a.len() + b.len() - 2) as f64 })
        }
        other => Ok(other?),
    }
}

fn with_pixels(dataset: &Dataset, pixels: Vec<Tensor<f64>>) -> Dataset {
    let samples = dataset.samples.iter().zip(pixels).map(|(s, p)| ImageSample { pixels: p, ..s.clone() }).collect();
    Dataset::new(samples)
}

/// Grad-CAM masks (for the predicted class) of every image in `dataset`.
pub fn gradcam_masked(
    params: &ModelParameters<f64>,
    config: &RetformerConfig,
    dataset: &Dataset,
    keep_fraction: f64,
    target: CamTarget,
) -> Result<Dataset, ExplainError> {
    let pixels = dataset
        .samples
        .par_iter()
        .map(|s| {
            let class = if model_forward(&s.pixels, params, config)? >= 0.5 { Label::Ad } else { Label::Hc };
            let grid = grad_cam(params, config, &s.pixels, class, target)?;
            apply_mask(&s.pixels, &heatmap_for_image(&grid, config), keep_fraction)
        })
        .collect::<Result<Vec<_>, ExplainError>>()?;
    Ok(with_pixels(dataset, pixels))
}

fn one_repetition(
    dataset: &Dataset,
    model: &RetformerConfig,
    train: &TrainConfig,
    options: &MaskingOptions,
    repetition: usize,
) -> Result<RepetitionAccuracy, ExplainError> {
    let seed = substream(options.seed, "masking-repetition", repetition as u64);
    let labels = dataset.labels();
    let subjects = dataset.subjects();
    let grouping = Grouping { labels: Some(&labels), subjects: options.group_by_subject.then_some(&subjects[..]) };
    let mut correct = [0.0; 3];
    let mut total = 0usize;
    for (o, (outer_train, outer_test)) in kfold(dataset.len(), options.k1, seed, &grouping)?.into_iter().enumerate() {
        let explainer_config = TrainConfig { seed: substream(seed, "explainer", o as u64), ..train.clone() };
        let (explainer, _) = train_model(&dataset.subset(&outer_train), model, &explainer_config)?;
        let original = dataset.subset(&outer_test);
        let gradcam = gradcam_masked(&explainer, model, &original, options.keep_fraction, options.target)?;
        let random_pixels = original
            .samples
            .iter()
            .zip(&outer_test)
            .map(|(s, &i)| random_mask(&s.pixels, options.keep_fraction, substream(seed, "random-mask", i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let random = with_pixels(&original, random_pixels);
        let variants = [&original, &gradcam, &random];

        let test_labels = original.labels();
        let test_subjects = original.subjects();
        let inner_grouping =
            Grouping { labels: Some(&test_labels), subjects: options.group_by_subject.then_some(&test_subjects[..]) };
        let inner = kfold(original.len(), options.k2, substream(seed, "inner", o as u64), &inner_grouping)?;
        for (j, (tr, te)) in inner.iter().enumerate() {
            let fit_config = TrainConfig { seed: substream(seed, "inner-fit", (o * options.k2 + j) as u64), ..train.clone() };
            for (v, data) in variants.iter().enumerate() {
                let (params, _) = train_model(&data.subset(tr), model, &fit_config)?;
                let scores = predict_scores(&params, model, &data.subset(te))?;
                correct[v] += accuracy(&scores) * te.len() as f64;
            }
            total += te.len();
        }
    }
    let acc = correct.map(|c| c / total.max(1) as f64);
    Ok(RepetitionAccuracy { repetition, original: acc[0], gradcam: acc[1], random: acc[2] })
}

/// Repeated nested-fold comparison of models trained on original,
/// Grad-CAM-masked and randomly masked images.
///
/// Each repetition splits the data into `k1` outer folds. An explainer
/// trained on the outer-train part masks the outer-test images; the
/// outer-test images are then split into `k2` folds on which three fresh
/// models (one per image variant, same initialization) are trained and
/// scored. Accuracies are pooled over folds per repetition.
pub fn masking_study(
    dataset: &Dataset,
    model: &RetformerConfig,
    train: &TrainConfig,
    options: &MaskingOptions,
) -> Result<MaskingReport, ExplainError> {
    check_keep(options.keep_fraction)?;
    let repetitions = (0..options.repetitions)
        .into_par_iter()
        .map(|r| one_repetition(dataset, model, train, options, r))
        .collect::<Result<Vec<_>, _>>()?;
    let report = |f: fn(&RepetitionAccuracy) -> f64| repetitions.iter().map(f).collect::<Vec<f64>>();
    let (orig, gc, rnd) = (report(|r| r.original), report(|r| r.gradcam), report(|r| r.random));
    Ok(MaskingReport {
        options: *options,
        orig_vs_gradcam: compare(&orig, &gc)?,
        gradcam_vs_random: compare(&gc, &rnd)?,
        repetitions,
    })
}
