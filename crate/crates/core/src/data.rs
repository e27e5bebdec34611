//! Image ingestion, preprocessing, synthetic retina-like datasets and
//! nested cross-validation fold planning.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::rng::rng_for;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("{0}: no images found")]
    Empty(PathBuf),
    #[error("{0}: class directory must be named AD or HC")]
    UnknownClass(PathBuf),
    #[error("pixel value {0} outside [0, 255]")]
    OutOfRange(f64),
    #[error("{0}")]
    Degenerate(String),
    #[error("cannot split {units} {what} into {folds} folds")]
    TooFewUnits { units: usize, what: &'static str, folds: usize },
}

/// Binary diagnosis label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    /// Healthy control.
    Hc = 0,
    /// Alzheimer's disease.
    Ad = 1,
}

impl Label {
    pub fn from_dir_name(name: &str) -> Option<Label> {
        match name.to_ascii_uppercase().as_str() {
            "AD" => Some(Label::Ad),
            "HC" => Some(Label::Hc),
            _ => None,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Ad => "AD",
            Label::Hc => "HC",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn target(self) -> f64 {
        self as u8 as f64
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Hc
        } else {
            Label::Ad
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// One preprocessed image, `[H, W, C]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor<f64>,
    pub label: Label,
    /// Source path or synthetic seed.
    pub source: String,
    /// Samples sharing a subject are kept in the same fold.
    pub subject_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    /// Files skipped during loading.
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>) -> Self {
        Self { samples, warnings: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample counts indexed by [`Label::index`].
    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0; 2];
        for s in &self.samples {
            c[s.label.index()] += 1;
        }
        c
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subjects(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn images(&self) -> Vec<&Tensor<f64>> {
        self.samples.iter().map(|s| &s.pixels).collect()
    }

    /// New dataset holding copies of `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.samples[i].clone()).collect())
    }

    /// Nested folds, stratified by label and optionally grouped by subject.
    pub fn nested_folds(&self, k1: usize, k2: usize, seed: u64, group_by_subject: bool) -> Result<SplitPlan, DataError> {
        let labels = self.labels();
        let subjects = self.subjects();
        let grouping = Grouping { labels: Some(&labels), subjects: group_by_subject.then_some(subjects.as_slice()) };
        nested_folds(self.len(), k1, k2, seed, &grouping)
    }
}

fn io_error(path: &Path, e: impl fmt::Display) -> DataError {
    DataError::Io { path: path.to_path_buf(), message: e.to_string() }
}

/// Divides 8-bit intensities by 255.
pub fn rescale_unit(image: &Tensor<f64>) -> Result<Tensor<f64>, DataError> {
    if let Some(&bad) = image.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(DataError::OutOfRange(bad));
    }
    Ok(image.map(|v| v / 255.0))
}

/// Bilinear resize of an `[H, W, C]` image with corner-aligned sampling.
pub fn resize_bilinear(image: &Tensor<f64>, out_h: usize, out_w: usize) -> Tensor<f64> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let coord = |i: usize, out: usize, len: usize| -> (usize, usize, f64) {
        let x = if out == 1 { (len - 1) as f64 / 2.0 } else { i as f64 * (len - 1) as f64 / (out - 1) as f64 };
        let lo = (x.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        (lo, hi, x - lo as f64)
    };
    let src = image.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, out_w, w);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out).expect("resize output shape")
}

/// Rescales 8-bit pixels to `[0, 1]` and resizes to `size × size`.
pub fn preprocess(raw: &Tensor<f64>, size: usize) -> Result<Tensor<f64>, DataError> {
    Ok(resize_bilinear(&rescale_unit(raw)?, size, size))
}

/// Decodes an image file into raw `[H, W, channels]` 8-bit intensities.
pub fn decode_image(path: &Path, channels: usize) -> Result<Tensor<f64>, DataError> {
    let decoded = image::open(path).map_err(|e| DataError::Decode { path: path.to_path_buf(), message: e.to_string() })?;
    let (w, h, data) = if channels == 1 {
        let g = decoded.to_luma8();
        (g.width(), g.height(), g.into_raw())
    } else {
        let g = decoded.to_rgb8();
        (g.width(), g.height(), g.into_raw())
    };
    let values = data.into_iter().map(f64::from).collect();
    Ok(Tensor::new(vec![h as usize, w as usize, channels], values).expect("decoded buffer shape"))
}

/// Writes a `[0, 1]` image as an 8-bit grayscale or RGB PNG.
pub fn write_png(path: &Path, image: &Tensor<f64>) -> Result<(), DataError> {
    let s = image.shape();
    let (h, w, c) = (s[0] as u32, s[1] as u32, s[2]);
    let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(DataError::Degenerate(format!("cannot write {c}-channel PNG"))),
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    image::save_buffer_with_format(path, &bytes, w, h, color, image::ImageFormat::Png).map_err(|e| io_error(path, e))
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| io_error(dir, e)))
        .collect::<Result<Vec<_>, _>>()?;
    entries.sort();
    Ok(entries)
}

fn class_dirs(root: &Path) -> Result<Vec<(Label, PathBuf)>, DataError> {
    let mut out = Vec::new();
    for path in sorted_entries(root)? {
        if !path.is_dir() {
            continue;
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let label = Label::from_dir_name(name).ok_or_else(|| DataError::UnknownClass(path.clone()))?;
        out.push((label, path));
    }
    if out.is_empty() {
        return Err(DataError::Empty(root.to_path_buf()));
    }
    Ok(out)
}

fn load_files(
    files: &[PathBuf],
    label: Label,
    subject: impl Fn(&Path) -> String + Sync,
    size: usize,
    channels: usize,
) -> Result<Vec<ImageSample>, DataError> {
    files
        .par_iter()
        .map(|path| {
            let pixels = preprocess(&decode_image(path, channels)?, size)?;
            Ok(ImageSample { pixels, label, source: path.display().to_string(), subject_id: subject(path) })
        })
        .collect()
}

/// Loads `root/<AD|HC>/<image>`; every image is its own subject.
pub fn load_image_dataset(root: &Path, image_size: usize, channels: usize) -> Result<Dataset, DataError> {
    let mut dataset = Dataset::default();
    for (label, dir) in class_dirs(root)? {
        let mut files = Vec::new();
        for path in sorted_entries(&dir)? {
            if is_image_file(&path) {
                files.push(path);
            } else {
                dataset.warnings.push(format!("skipped {}", path.display()));
            }
        }
        if files.is_empty() {
            return Err(DataError::Empty(dir));
        }
        let samples = load_files(&files, label, |p| p.display().to_string(), image_size, 1.max(channels))?;
        dataset.samples.extend(samples);
    }
    Ok(dataset)
}

/// One sample per slice image of an OCT volume directory, all sharing `subject_id`.
pub fn slice_oct_volume(dir: &Path, label: Label, subject_id: &str, image_size: usize) -> Result<Vec<ImageSample>, DataError> {
    let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_image_file(p)).collect();
    if files.is_empty() {
        return Err(DataError::Empty(dir.to_path_buf()));
    }
    load_files(&files, label, |_| subject_id.to_string(), image_size, 1)
}

/// Loads `root/<AD|HC>/<volume_id>/<slice>.png`; the volume directory name is the subject.
pub fn load_oct_dataset(root: &Path, image_size: usize) -> Result<Dataset, DataError> {
    let mut dataset = Dataset::default();
    for (label, dir) in class_dirs(root)? {
        let mut volumes = 0;
        for path in sorted_entries(&dir)? {
            if !path.is_dir() {
                dataset.warnings.push(format!("skipped {}", path.display()));
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let subject = format!("{}/{}", label.dir_name(), name);
            dataset.samples.extend(slice_oct_volume(&path, label, &subject, image_size)?);
            volumes += 1;
        }
        if volumes == 0 {
            return Err(DataError::Empty(dir));
        }
    }
    Ok(dataset)
}

/// Writes `dataset` in the layout read by [`load_image_dataset`]
/// (`grouped = false`) or [`load_oct_dataset`] (`grouped = true`).
pub fn write_dataset(dataset: &Dataset, root: &Path, grouped: bool) -> Result<(), DataError> {
    let mut counters: BTreeMap<String, usize> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let class_dir = root.join(s.label.dir_name());
        let path = if grouped {
            let volume: String = s.subject_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
            let n = counters.entry(volume.clone()).or_default();
            *n += 1;
            class_dir.join(volume).join(format!("slice_{:03}.png", *n - 1))
        } else {
            class_dir.join(format!("img_{i:05}.png"))
        };
        write_png(&path, &s.pixels)?;
    }
    Ok(())
}

/// Training indices with minority-class indices redrawn uniformly with
/// replacement until both classes are equally frequent. The original indices
/// come first, in order.
pub fn random_oversample(train: &[usize], labels: &[Label], seed: u64) -> Result<Vec<usize>, DataError> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &i in train {
        by_class[labels[i].index()].push(i);
    }
    if by_class.iter().any(Vec::is_empty) {
        return Err(DataError::Degenerate("oversampling needs both classes in the training set".into()));
    }
    let minority = if by_class[0].len() < by_class[1].len() { 0 } else { 1 };
    let deficit = by_class[1 - minority].len() - by_class[minority].len();
    let mut rng = rng_for(seed, "oversample", 0);
    let mut out = train.to_vec();
    out.extend((0..deficit).map(|_| by_class[minority][rng.random_range(0..by_class[minority].len())]));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthKind {
    /// Grayscale cross-sections with horizontal retinal-layer bands.
    OctLike,
    /// RGB photographs with an optic disc and vessels.
    FundusLike,
}

impl SynthKind {
    pub fn channels(self) -> usize {
        match self {
            SynthKind::OctLike => 1,
            SynthKind::FundusLike => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n_per_class: usize,
    pub image_size: usize,
    /// 0 makes the classes identically distributed; 1 is the strongest signal.
    pub effect_strength: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub seed: u64,
}

/// Vertical placement of the layers of an [`SynthKind::OctLike`] image, as fractions of its height.
const BAND_TOP: f64 = 0.25;
const BAND_THICKNESS: f64 = 0.25;
const BAND_JITTER: f64 = 0.05;
const DEEP_BAND_TOP: f64 = 0.72;
const DEEP_BAND_THICKNESS: f64 = 0.1;

impl SynthSpec {
    pub fn oct(n_per_class: usize, image_size: usize, effect_strength: f64, noise: f64, seed: u64) -> Self {
        Self { kind: SynthKind::OctLike, n_per_class, image_size, effect_strength, noise, seed }
    }

    pub fn fundus(n_per_class: usize, image_size: usize, effect_strength: f64, noise: f64, seed: u64) -> Self {
        Self { kind: SynthKind::FundusLike, n_per_class, image_size, effect_strength, noise, seed }
    }

    /// Pixels whose distribution depends on the label: for OCT-like images,
    /// every row the upper band can occupy.
    pub fn discriminative_region(&self) -> Vec<bool> {
        let s = self.image_size as f64;
        let lo = (BAND_TOP - BAND_JITTER) * s;
        let hi = (BAND_TOP + BAND_JITTER + BAND_THICKNESS) * s;
        let mut mask = Vec::with_capacity(self.image_size * self.image_size);
        for y in 0..self.image_size {
            let (top, bottom) = (y as f64, y as f64 + 1.0);
            let inside = bottom > lo && top < hi;
            mask.extend(std::iter::repeat_n(inside, self.image_size));
        }
        mask
    }
}

/// Fraction of the pixel row `[y, y+1)` covered by the interval `[a, b)`.
fn coverage(y: usize, a: f64, b: f64) -> f64 {
    let (lo, hi) = (y as f64, y as f64 + 1.0);
    (hi.min(b) - lo.max(a)).max(0.0)
}

fn render_oct(spec: &SynthSpec, label: Label, rng: &mut impl Rng) -> Tensor<f64> {
    let s = spec.image_size as f64;
    let thinning = if label == Label::Ad { 0.5 * spec.effect_strength.clamp(0.0, 1.0) } else { 0.0 };
    let top = (BAND_TOP + rng.random_range(-BAND_JITTER..=BAND_JITTER)) * s;
    let full = BAND_THICKNESS * s;
    let thickness = full * (1.0 - thinning);
    let deep_top = (DEEP_BAND_TOP + rng.random_range(-BAND_JITTER..=BAND_JITTER)) * s;
    let brightness = rng.random_range(0.75..0.9);
    let deep_brightness = rng.random_range(0.5..0.6);
    let tissue = rng.random_range(0.3..0.4);
    let gap_level = rng.random_range(0.05..0.12);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    Tensor::from_fn(&[spec.image_size, spec.image_size, 1], |i| {
        let y = i / spec.image_size;
        let band = coverage(y, top, top + thickness);
        // The thinned part of the band shows as a dark layer.
        let gap = coverage(y, top + thickness, top + full);
        let deep = coverage(y, deep_top, deep_top + DEEP_BAND_THICKNESS * s);
        let v = tissue + band * (brightness - tissue) + gap * (gap_level - tissue) + deep * (deep_brightness - tissue);
        (v + noise.sample(rng)).clamp(0.0, 1.0)
    })
}

fn render_fundus(spec: &SynthSpec, label: Label, rng: &mut impl Rng) -> Tensor<f64> {
    let n = spec.image_size;
    let s = n as f64;
    let weakening = if label == Label::Ad { 0.5 * spec.effect_strength.clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (s * rng.random_range(0.6..0.7), s * rng.random_range(0.45..0.55));
    let disc_r = s * rng.random_range(0.08..0.11);
    let width = s * 0.035 * (1.0 - weakening);
    let contrast = 0.35 * (1.0 - weakening);
    let curves: Vec<(f64, f64)> = (0..4).map(|k| (k as f64 * 1.5 - 2.25 + rng.random_range(-0.2..0.2), rng.random_range(0.5..1.2))).collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let base = [0.72, 0.32, 0.12];
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let r = ((px - s / 2.0).powi(2) + (py - s / 2.0).powi(2)).sqrt() / (s / 2.0);
            let vignette = (1.0 - 0.45 * r * r).max(0.0);
            let disc = (1.0 - (((px - cx).powi(2) + (py - cy).powi(2)).sqrt() / disc_r)).clamp(0.0, 1.0).powf(0.5);
            // Vessels leave the disc leftwards along parabolic arcs.
            let mut vessel: f64 = 0.0;
            for &(slope, bend) in &curves {
                let t = (cx - px) / s;
                if t > 0.0 {
                    let vy = cy + s * (slope * 0.25 * t + bend * t * t * slope.signum());
                    let d = (py - vy).abs();
                    vessel = vessel.max((1.0 - d / width.max(1e-6)).clamp(0.0, 1.0));
                }
            }
            for b in &base {
                let v = b * vignette + disc * (1.0 - b * vignette) * 0.9 - vessel * contrast * b;
                data.push((v + noise.sample(rng)).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![n, n, 3], data).expect("fundus shape")
}

/// Balanced synthetic dataset: `n_per_class` HC samples followed by as many AD samples.
pub fn synthesize_dataset(spec: &SynthSpec) -> Dataset {
    let samples = (0..2 * spec.n_per_class)
        .into_par_iter()
        .map(|i| {
            let label = if i < spec.n_per_class { Label::Hc } else { Label::Ad };
            let mut rng = rng_for(spec.seed, "synth", i as u64);
            let pixels = match spec.kind {
                SynthKind::OctLike => render_oct(spec, label, &mut rng),
                SynthKind::FundusLike => render_fundus(spec, label, &mut rng),
            };
            let id = format!("synth-{}-{i:05}", spec.seed);
            ImageSample { pixels, label, source: id.clone(), subject_id: id }
        })
        .collect();
    Dataset::new(samples)
}

/// Optional structure respected by fold planning.
#[derive(Clone, Copy, Debug, Default)]
pub struct Grouping<'a> {
    /// Stratify folds by label.
    pub labels: Option<&'a [Label]>,
    /// Keep all samples of a subject in one fold.
    pub subjects: Option<&'a [String]>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OuterSplit {
    pub test: Vec<usize>,
    pub inner: Vec<InnerSplit>,
}

impl OuterSplit {
    /// Every index outside the test fold, ascending.
    pub fn development(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.inner[0].train.iter().chain(&self.inner[0].validation).copied().collect();
        all.sort_unstable();
        all
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n: usize,
    pub k1: usize,
    pub k2: usize,
    pub outer: Vec<OuterSplit>,
}

/// A fold-assignment unit: one subject (or one sample) and its indices.
struct Unit {
    indices: Vec<usize>,
    label: usize,
}

fn units(indices: &[usize], grouping: &Grouping<'_>) -> Vec<Unit> {
    let label_of = |i: usize| grouping.labels.map_or(0, |l| l[i].index());
    match grouping.subjects {
        None => indices.iter().map(|&i| Unit { indices: vec![i], label: label_of(i) }).collect(),
        Some(subjects) => {
            let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for &i in indices {
                by_subject.entry(subjects[i].as_str()).or_default().push(i);
            }
            by_subject
                .into_values()
                .map(|indices| {
                    let ad = indices.iter().filter(|&&i| label_of(i) == 1).count();
                    Unit { label: usize::from(2 * ad > indices.len()), indices }
                })
                .collect()
        }
    }
}

/// Splits `indices` into `k` folds, stratified by unit label and balanced by size.
fn assign_folds(indices: &[usize], k: usize, grouping: &Grouping<'_>, rng: &mut impl Rng, what: &'static str) -> Result<Vec<Vec<usize>>, DataError> {
    let mut all = units(indices, grouping);
    if all.len() < k || k == 0 {
        return Err(DataError::TooFewUnits { units: all.len(), what, folds: k });
    }
    all.shuffle(rng);
    all.sort_by_key(|u| u.label);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for unit in all {
        // Smallest fold first, scanning from the rotating cursor.
        let target = (0..k).map(|j| (next + j) % k).min_by_key(|&f| folds[f].len()).expect("k > 0");
        folds[target].extend(unit.indices);
        next = (target + 1) % k;
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Plans `k1` outer folds, each with `k2` inner train/validation splits of
/// the remaining indices.
pub fn nested_folds(n: usize, k1: usize, k2: usize, seed: u64, grouping: &Grouping<'_>) -> Result<SplitPlan, DataError> {
    if k1 < 2 || k2 < 2 {
        return Err(DataError::Degenerate(format!("fold counts must be at least 2, got k1={k1}, k2={k2}")));
    }
    if n < k1 * k2 {
        return Err(DataError::TooFewUnits { units: n, what: "samples", folds: k1 * k2 });
    }
    let what = if grouping.subjects.is_some() { "subjects" } else { "samples" };
    let all: Vec<usize> = (0..n).collect();
    let tests = assign_folds(&all, k1, grouping, &mut rng_for(seed, "outer-folds", 0), what)?;
    let mut outer = Vec::with_capacity(k1);
    for (o, test) in tests.into_iter().enumerate() {
        let mut in_test = vec![false; n];
        test.iter().for_each(|&i| in_test[i] = true);
        let rest: Vec<usize> = all.iter().copied().filter(|&i| !in_test[i]).collect();
        let validations = assign_folds(&rest, k2, grouping, &mut rng_for(seed, "inner-folds", o as u64), what)?;
        let inner = validations
            .into_iter()
            .map(|validation| {
                let mut in_val = vec![false; n];
                validation.iter().for_each(|&i| in_val[i] = true);
                let train = rest.iter().copied().filter(|&i| !in_val[i]).collect();
                InnerSplit { train, validation }
            })
            .collect();
        outer.push(OuterSplit { test, inner });
    }
    Ok(SplitPlan { n, k1, k2, outer })
}

/// Single-level `k`-fold split: `(train, test)` per fold.
pub fn kfold(n: usize, k: usize, seed: u64, grouping: &Grouping<'_>) -> Result<Vec<(Vec<usize>, Vec<usize>)>, DataError> {
    if k < 2 {
        return Err(DataError::Degenerate(format!("fold count must be at least 2, got {k}")));
    }
    let what = if grouping.subjects.is_some() { "subjects" } else { "samples" };
    let all: Vec<usize> = (0..n).collect();
    let tests = assign_folds(&all, k, grouping, &mut rng_for(seed, "kfold", 0), what)?;
    Ok(tests
        .into_iter()
        .map(|test| {
            let mut in_test = vec![false; n];
            test.iter().for_each(|&i| in_test[i] = true);
            ((0..n).filter(|&i| !in_test[i]).collect(), test)
        })
        .collect())
}
