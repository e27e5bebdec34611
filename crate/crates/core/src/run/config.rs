use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{load_image_dataset, load_oct_dataset, synthesize_dataset, Dataset, SynthSpec};
use crate::explain::{CamTarget, MaskingOptions};
use crate::hpo::{BoOptions, TuneOptions};
use crate::model::{default_d_head, AblationVariant, RetformerConfig};
use crate::rng::substream;
use crate::train::TrainConfig;

use super::RunError;

/// Where a configuration value came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Default,
    Line(usize),
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Default => write!(f, "default"),
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag => write!(f, "command line"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    SynthOct,
    SynthFundus,
    /// `root/{AD,HC}/<volume>/<slice>` directories of B-scan slices.
    OctVolumes,
    /// `root/{AD,HC}/<image>` class folders.
    ImageFolders,
}

impl FromStr for DatasetKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "synth_oct" => DatasetKind::SynthOct,
            "synth_fundus" => DatasetKind::SynthFundus,
            "oct_volumes" => DatasetKind::OctVolumes,
            "image_folders" => DatasetKind::ImageFolders,
            _ => return Err("expected one of synth_oct, synth_fundus, oct_volumes, image_folders".into()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    ImageSize,
    BatchSize,
}

impl FromStr for SweepKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "image_size" => Ok(SweepKind::ImageSize),
            "batch_size" => Ok(SweepKind::BatchSize),
            _ => Err("expected image_size or batch_size".into()),
        }
    }
}

fn parse_variant(s: &str) -> Result<AblationVariant, String> {
    let names = [
        "baseline",
        "learned_position",
        "mlp_patch_embedding",
        "no_first_norm",
        "multihead_attention",
        "no_attention",
        "no_first_residual",
        "no_second_norm",
        "gelu_mlp",
        "no_swiglu",
        "no_second_residual",
    ];
    names
        .iter()
        .position(|n| *n == s)
        .map(|i| AblationVariant::ALL[i])
        .ok_or_else(|| format!("expected one of {}", names.join(", ")))
}

fn parse_target(s: &str) -> Result<CamTarget, String> {
    match s {
        "last_norm" => Ok(CamTarget::LastNorm),
        "embedding" => Ok(CamTarget::Embedding),
        _ => s
            .strip_prefix("layer_")
            .and_then(|i| i.parse().ok())
            .map(CamTarget::LayerOutput)
            .ok_or_else(|| "expected last_norm, embedding or layer_<i>".into()),
    }
}

/// Every accepted key with its meaning; defaults are the tuned OCT values.
pub const KEYS: &[(&str, &str)] = &[
    ("dataset", "synth_oct | synth_fundus | oct_volumes | image_folders (synth_oct)"),
    ("data_root", "dataset directory for oct_volumes and image_folders"),
    ("architecture", "oct | fundus: tuned hyperparameter preset (oct)"),
    ("image_size", "input side length after resizing (50)"),
    ("channels", "1 for grayscale, 3 for RGB (from architecture)"),
    ("patch_size", "patch side length (4)"),
    ("d_model", "embedding width D_E (62)"),
    ("n_layers", "transformer layers (1)"),
    ("n_heads", "attention heads H (12)"),
    ("n_groups", "key/value groups g, must divide n_heads (3)"),
    ("d_head", "attention width D_A (max(2, 2*floor(d_model/(2*n_heads))))"),
    ("mlp_hidden_1", "first classifier hidden width (47)"),
    ("mlp_hidden_2", "second classifier hidden width (31)"),
    ("variant", "architectural change, e.g. no_first_residual (baseline)"),
    ("epochs", "training epochs (100)"),
    ("batch_size", "mini-batch size (250)"),
    ("learning_rate", "Adam learning rate (0.001)"),
    ("beta1", "Adam beta1 (0.9)"),
    ("beta2", "Adam beta2 (0.999)"),
    ("epsilon", "Adam epsilon (1e-8)"),
    ("oversample", "balance classes by random oversampling (true)"),
    ("record_timings", "write per-epoch seconds to training logs (false)"),
    ("seed", "master seed (0)"),
    ("synth_n_per_class", "synthetic samples per class (200)"),
    ("synth_effect", "synthetic class effect strength (1.0)"),
    ("synth_noise", "synthetic Gaussian noise level (0.05)"),
    ("k1", "outer folds (3)"),
    ("k2", "inner folds (3)"),
    ("budget", "Bayesian optimisation evaluations per outer fold (15)"),
    ("group_by_subject", "keep each subject inside one fold (false)"),
    ("ablation_folds", "cross-validation folds per ablation row (3)"),
    ("keep_fraction", "fraction of pixels kept by masks (0.3)"),
    ("repetitions", "masking-study repetitions (25)"),
    ("alpha", "masking-study significance threshold (0.025)"),
    ("mask_k1", "masking-study outer folds (2)"),
    ("mask_k2", "masking-study inner folds (2)"),
    ("cam_target", "last_norm | embedding | layer_<i> (last_norm)"),
    ("explain_count", "test images rendered by explain (8)"),
    ("sweep_kind", "image_size | batch_size (image_size)"),
    ("grid", "comma-separated sweep settings (10,20,50)"),
    ("threads", "worker threads, 0 for all cores (0)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_root: Option<PathBuf>,
    pub model: RetformerConfig,
    pub variant: AblationVariant,
    pub train: TrainConfig,
    pub seed: u64,
    pub synth_n_per_class: usize,
    pub synth_effect: f64,
    pub synth_noise: f64,
    pub k1: usize,
    pub k2: usize,
    pub budget: usize,
    pub group_by_subject: bool,
    pub ablation_folds: usize,
    pub keep_fraction: f64,
    pub repetitions: usize,
    pub alpha: f64,
    pub mask_k1: usize,
    pub mask_k2: usize,
    pub cam_target: CamTarget,
    pub explain_count: usize,
    pub sweep_kind: SweepKind,
    pub grid: Vec<usize>,
    pub threads: usize,
    /// Origin of every key that was set explicitly.
    pub origins: BTreeMap<String, Origin>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::SynthOct,
            data_root: None,
            model: RetformerConfig::oct_default(),
            variant: AblationVariant::Baseline,
            train: TrainConfig::default(),
            seed: 0,
            synth_n_per_class: 200,
            synth_effect: 1.0,
            synth_noise: 0.05,
            k1: 3,
            k2: 3,
            budget: 15,
            group_by_subject: false,
            ablation_folds: 3,
            keep_fraction: 0.3,
            repetitions: 25,
            alpha: 0.025,
            mask_k1: 2,
            mask_k2: 2,
            cam_target: CamTarget::LastNorm,
            explain_count: 8,
            sweep_kind: SweepKind::ImageSize,
            grid: vec![10, 20, 50],
            threads: 0,
            origins: BTreeMap::new(),
        }
    }
}

/// A parsed configuration and the warnings raised while reading it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedConfig {
    pub config: RunConfig,
    pub warnings: Vec<String>,
}

fn bad(key: &str, origin: &Origin, message: impl Into<String>) -> RunError {
    RunError::Config { key: key.to_string(), origin: origin.to_string(), message: message.into() }
}

fn value<T: FromStr>(key: &str, raw: &str, origin: &Origin) -> Result<T, RunError> {
    raw.parse().map_err(|_| bad(key, origin, format!("cannot parse `{raw}` as {}", std::any::type_name::<T>())))
}

fn boolean(key: &str, raw: &str, origin: &Origin) -> Result<bool, RunError> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, origin, format!("expected true or false, got `{raw}`"))),
    }
}

/// Reads `key = value` lines (`#` starts a comment) and applies `overrides`
/// on top. A repeated key keeps its last value and raises a warning.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<ParsedConfig, RunError> {
    let mut entries: BTreeMap<String, (String, Origin)> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let origin = Origin::Line(n + 1);
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, raw) = content
            .split_once('=')
            .ok_or_else(|| bad(content, &origin, "expected `key = value`"))?;
        let key = key.trim().to_string();
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(bad(&key, &origin, "unknown key"));
        }
        if let Some((_, previous)) = entries.get(&key) {
            warnings.push(format!("`{key}` set again on {origin} (first set on {previous}); the last value wins"));
        }
        entries.insert(key, (raw.trim().to_string(), origin));
    }
    for (key, raw) in overrides {
        if !KEYS.iter().any(|(k, _)| k == key) {
            return Err(bad(key, &Origin::Flag, "unknown key"));
        }
        entries.insert(key.clone(), (raw.clone(), Origin::Flag));
    }

    let mut cfg = RunConfig::default();
    if let Some((raw, origin)) = entries.get("architecture") {
        cfg.model = match raw.as_str() {
            "oct" => RetformerConfig::oct_default(),
            "fundus" => RetformerConfig::fundus_default(),
            _ => return Err(bad("architecture", origin, "expected oct or fundus")),
        };
    }
    let mut d_head_set = false;
    for (key, (raw, origin)) in &entries {
        let (raw, o) = (raw.as_str(), origin);
        let text_err = |m: String| bad(key, o, m);
        match key.as_str() {
            "architecture" => {}
            "dataset" => cfg.dataset = raw.parse().map_err(text_err)?,
            "data_root" => cfg.data_root = Some(PathBuf::from(raw)),
            "image_size" => cfg.model.image_size = value(key, raw, o)?,
            "channels" => cfg.model.channels = value(key, raw, o)?,
            "patch_size" => cfg.model.patch_size = value(key, raw, o)?,
            "d_model" => cfg.model.d_model = value(key, raw, o)?,
            "n_layers" => cfg.model.n_layers = value(key, raw, o)?,
            "n_heads" => cfg.model.n_heads = value(key, raw, o)?,
            "n_groups" => cfg.model.n_groups = value(key, raw, o)?,
            "d_head" => {
                cfg.model.d_head = value(key, raw, o)?;
                d_head_set = true;
            }
            "mlp_hidden_1" => cfg.model.mlp_hidden_1 = value(key, raw, o)?,
            "mlp_hidden_2" => cfg.model.mlp_hidden_2 = value(key, raw, o)?,
            "variant" => cfg.variant = parse_variant(raw).map_err(text_err)?,
            "epochs" => cfg.train.epochs = value(key, raw, o)?,
            "batch_size" => cfg.train.batch_size = value(key, raw, o)?,
            "learning_rate" => cfg.train.learning_rate = value(key, raw, o)?,
            "beta1" => cfg.train.beta1 = value(key, raw, o)?,
            "beta2" => cfg.train.beta2 = value(key, raw, o)?,
            "epsilon" => cfg.train.epsilon = value(key, raw, o)?,
            "oversample" => cfg.train.oversample = boolean(key, raw, o)?,
            "record_timings" => cfg.train.record_timings = boolean(key, raw, o)?,
            "seed" => cfg.seed = value(key, raw, o)?,
            "synth_n_per_class" => cfg.synth_n_per_class = value(key, raw, o)?,
            "synth_effect" => cfg.synth_effect = value(key, raw, o)?,
            "synth_noise" => cfg.synth_noise = value(key, raw, o)?,
            "k1" => cfg.k1 = value(key, raw, o)?,
            "k2" => cfg.k2 = value(key, raw, o)?,
            "budget" => cfg.budget = value(key, raw, o)?,
            "group_by_subject" => cfg.group_by_subject = boolean(key, raw, o)?,
            "ablation_folds" => cfg.ablation_folds = value(key, raw, o)?,
            "keep_fraction" => cfg.keep_fraction = value(key, raw, o)?,
            "repetitions" => cfg.repetitions = value(key, raw, o)?,
            "alpha" => cfg.alpha = value(key, raw, o)?,
            "mask_k1" => cfg.mask_k1 = value(key, raw, o)?,
            "mask_k2" => cfg.mask_k2 = value(key, raw, o)?,
            "cam_target" => cfg.cam_target = parse_target(raw).map_err(text_err)?,
            "explain_count" => cfg.explain_count = value(key, raw, o)?,
            "sweep_kind" => cfg.sweep_kind = raw.parse().map_err(text_err)?,
            "grid" => {
                cfg.grid = raw
                    .split(',')
                    .map(|v| value::<usize>(key, v.trim(), o))
                    .collect::<Result<_, _>>()?;
            }
            "threads" => cfg.threads = value(key, raw, o)?,
            _ => unreachable!("keys are checked against KEYS"),
        }
    }
    if !d_head_set {
        cfg.model.d_head = default_d_head(cfg.model.d_model, cfg.model.n_heads);
    }
    cfg.train.seed = cfg.seed;
    cfg.origins = entries.into_iter().map(|(k, (_, o))| (k, o)).collect();
    cfg.validate()?;
    Ok(ParsedConfig { config: cfg, warnings })
}

/// [`parse_config`] on the contents of `path`, or on an empty file when absent.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ParsedConfig, RunError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| RunError::Io { path: p.to_path_buf(), message: e.to_string() })?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

impl RunConfig {
    fn origin(&self, key: &str) -> Origin {
        self.origins.get(key).cloned().unwrap_or(Origin::Default)
    }

    fn check(&self, ok: bool, key: &str, message: &str) -> Result<(), RunError> {
        if ok {
            Ok(())
        } else {
            Err(bad(key, &self.origin(key), message))
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let m = &self.model;
        self.check(m.n_heads > 0, "n_heads", "must be at least 1")?;
        self.check(
            m.n_groups > 0 && m.n_heads % m.n_groups == 0,
            "n_groups",
            &format!("n_heads = {} is not divisible by n_groups = {}", m.n_heads, m.n_groups),
        )?;
        self.check(m.image_size > 0, "image_size", "must be positive")?;
        self.check(m.patch_size > 0 && m.patch_size <= m.image_size, "patch_size", "must lie in 1..=image_size")?;
        self.check(m.channels == 1 || m.channels == 3, "channels", "must be 1 or 3")?;
        self.check(m.d_head >= 2 && m.d_head % 2 == 0, "d_head", "must be even and at least 2")?;
        self.check(m.d_model > 0, "d_model", "must be positive")?;
        self.check(m.n_layers > 0, "n_layers", "must be at least 1")?;
        self.check(m.mlp_hidden_1 > 0, "mlp_hidden_1", "must be positive")?;
        self.check(m.mlp_hidden_2 > 0, "mlp_hidden_2", "must be positive")?;
        self.check(self.train.epochs >= 1, "epochs", "must be at least 1")?;
        self.check(self.train.batch_size >= 1, "batch_size", "must be at least 1")?;
        self.check(self.train.learning_rate > 0.0, "learning_rate", "must be positive")?;
        self.check((0.0..1.0).contains(&self.train.beta1), "beta1", "must lie in [0, 1)")?;
        self.check((0.0..1.0).contains(&self.train.beta2), "beta2", "must lie in [0, 1)")?;
        self.check(self.train.epsilon > 0.0, "epsilon", "must be positive")?;
        self.check(self.synth_n_per_class >= 1, "synth_n_per_class", "must be at least 1")?;
        self.check(self.synth_effect >= 0.0, "synth_effect", "must be non-negative")?;
        self.check(self.synth_noise >= 0.0, "synth_noise", "must be non-negative")?;
        self.check(self.k1 >= 2, "k1", "must be at least 2")?;
        self.check(self.k2 >= 2, "k2", "must be at least 2")?;
        self.check(self.budget >= 1, "budget", "must be at least 1")?;
        self.check(self.ablation_folds >= 2, "ablation_folds", "must be at least 2")?;
        self.check(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0, "keep_fraction", "must lie in (0, 1]")?;
        self.check(self.repetitions >= 2, "repetitions", "must be at least 2")?;
        self.check(self.alpha > 0.0 && self.alpha < 1.0, "alpha", "must lie in (0, 1)")?;
        self.check(self.mask_k1 >= 2, "mask_k1", "must be at least 2")?;
        self.check(self.mask_k2 >= 2, "mask_k2", "must be at least 2")?;
        self.check(!self.grid.is_empty() && self.grid.iter().all(|&g| g > 0), "grid", "needs positive settings")?;
        let needs_root = matches!(self.dataset, DatasetKind::OctVolumes | DatasetKind::ImageFolders);
        self.check(!needs_root || self.data_root.is_some(), "data_root", "is required for on-disk datasets")?;
        let synth_channels = match self.dataset {
            DatasetKind::SynthOct => Some(1),
            DatasetKind::SynthFundus => Some(3),
            DatasetKind::OctVolumes => Some(1),
            DatasetKind::ImageFolders => None,
        };
        if let Some(c) = synth_channels {
            self.check(m.channels == c, "channels", &format!("this dataset has {c} channel(s)"))?;
        }
        if let Some(CamTarget::LayerOutput(i)) = Some(self.cam_target) {
            self.check(i < m.n_layers, "cam_target", "layer index exceeds n_layers")?;
        }
        Ok(())
    }

    /// Architecture with the configured variant applied.
    pub fn model_config(&self) -> RetformerConfig {
        let model = self.model.clone();
        let flags = self.variant.apply(model.ablation);
        model.with_ablation(flags)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// Seed of the synthetic data; independent of the training substreams.
    pub fn data_seed(&self) -> u64 {
        substream(self.seed, "data", 0)
    }

    pub fn synth_spec(&self, image_size: usize) -> Option<SynthSpec> {
        let (n, e, s, seed) = (self.synth_n_per_class, self.synth_effect, self.synth_noise, self.data_seed());
        match self.dataset {
            DatasetKind::SynthOct => Some(SynthSpec::oct(n, image_size, e, s, seed)),
            DatasetKind::SynthFundus => Some(SynthSpec::fundus(n, image_size, e, s, seed)),
            _ => None,
        }
    }

    /// Loads or synthesizes the configured dataset at `image_size`.
    pub fn load_dataset(&self, image_size: usize) -> Result<Dataset, RunError> {
        if let Some(spec) = self.synth_spec(image_size) {
            return Ok(synthesize_dataset(&spec));
        }
        let root = self.data_root.as_deref().expect("validated");
        let dataset = match self.dataset {
            DatasetKind::OctVolumes => load_oct_dataset(root, image_size)?,
            _ => load_image_dataset(root, image_size, self.model.channels)?,
        };
        for w in &dataset.warnings {
            log::warn!("{w}");
        }
        Ok(dataset)
    }

    pub fn tune_options(&self) -> TuneOptions {
        TuneOptions {
            budget: self.budget,
            k1: self.k1,
            k2: self.k2,
            seed: self.seed,
            group_by_subject: self.group_by_subject,
            bo: BoOptions::default(),
        }
    }

    pub fn masking_options(&self) -> MaskingOptions {
        MaskingOptions {
            k1: self.mask_k1,
            k2: self.mask_k2,
            repetitions: self.repetitions,
            keep_fraction: self.keep_fraction,
            alpha: self.alpha,
            seed: self.seed,
            group_by_subject: self.group_by_subject,
            target: self.cam_target,
        }
    }
}
