//! Bayesian hyperparameter optimization (Gaussian-process surrogate with
//! expected improvement) inside nested cross-validation.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::data::{DataError, Dataset, Label, SplitPlan};
use crate::metrics::{auc, classification_metrics, confusion, format_mean_std_percent, mean_std, ClassificationMetrics};
use crate::model::{default_d_head, RetformerConfig};
use crate::rng::{rng_for, substream};
use crate::train::{predict_scores, train_model, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum HpoError {
    #[error("invalid search space: {0}")]
    Space(String),
    #[error("covariance factorization failed even with jitter {0:e}")]
    Factorization(f64),
    #[error("GP needs at least one trial")]
    NoTrials,
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prior {
    Uniform,
    /// Uniform in `ln v`, rounded to an integer.
    LogUniform,
}

/// An integer hyperparameter with inclusive bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub lower: i64,
    pub upper: i64,
    pub prior: Prior,
}

impl Dimension {
    pub fn new(name: &str, lower: i64, upper: i64, prior: Prior) -> Self {
        Self { name: name.to_string(), lower, upper, prior }
    }

    /// Maps a value to `[0, 1]` (in log space for log-uniform dimensions).
    pub fn normalize(&self, v: i64) -> f64 {
        if self.upper == self.lower {
            return 0.5;
        }
        match self.prior {
            Prior::Uniform => (v - self.lower) as f64 / (self.upper - self.lower) as f64,
            Prior::LogUniform => ((v as f64).ln() - (self.lower as f64).ln()) / ((self.upper as f64).ln() - (self.lower as f64).ln()),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> i64 {
        match self.prior {
            Prior::Uniform => rng.random_range(self.lower..=self.upper),
            Prior::LogUniform => {
                let (lo, hi) = ((self.lower as f64).ln(), (self.upper as f64).ln());
                let v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                (v.exp().round() as i64).clamp(self.lower, self.upper)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dimension>,
}

impl SearchSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<Self, HpoError> {
        let space = Self { dims };
        space.validate()?;
        Ok(space)
    }

    /// The Retformer space: every dimension uniform.
    pub fn retformer() -> Self {
        let u = |n, lo, hi| Dimension::new(n, lo, hi, Prior::Uniform);
        Self {
            dims: vec![
                u("d_model", 32, 64),
                u("patch_size", 4, 9),
                u("n_layers", 1, 5),
                u("n_heads", 1, 25),
                u("n_groups", 1, 5),
                u("mlp_hidden_1", 32, 64),
                u("mlp_hidden_2", 16, 32),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), HpoError> {
        if self.dims.is_empty() {
            return Err(HpoError::Space("no dimensions".into()));
        }
        for d in &self.dims {
            if d.lower > d.upper {
                return Err(HpoError::Space(format!("{}: lower {} exceeds upper {}", d.name, d.lower, d.upper)));
            }
            if d.prior == Prior::LogUniform && d.lower < 1 {
                return Err(HpoError::Space(format!("{}: log-uniform needs lower >= 1", d.name)));
            }
        }
        Ok(())
    }

    pub fn contains(&self, point: &[i64]) -> bool {
        point.len() == self.dims.len() && self.dims.iter().zip(point).all(|(d, &v)| (d.lower..=d.upper).contains(&v))
    }

    pub fn normalize(&self, point: &[i64]) -> Vec<f64> {
        self.dims.iter().zip(point).map(|(d, &v)| d.normalize(v)).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<i64> {
        self.dims.iter().map(|d| d.sample(rng)).collect()
    }
}

/// One draw from the prior of every dimension.
pub fn sample_prior(space: &SearchSpace, seed: u64) -> Vec<i64> {
    space.sample(&mut rng_for(seed, "prior", 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub config: Vec<i64>,
    /// Higher is better.
    pub score: f64,
}

/// Squared-exponential kernel settings on the normalized cube.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        Self { length_scale: 0.2, signal_variance: 1.0, noise: 1e-6 }
    }
}

impl GpHyper {
    fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        self.signal_variance * (-0.5 * d2 / (self.length_scale * self.length_scale)).exp()
    }
}

/// Exact GP regression on standardized scores.
#[derive(Clone, Debug)]
pub struct GpModel {
    pub inputs: Vec<Vec<f64>>,
    /// Standardized targets, one per deduplicated input.
    pub targets: Vec<f64>,
    pub score_mean: f64,
    pub score_std: f64,
    pub hyper: GpHyper,
    /// Jitter that was added to the diagonal on top of the noise.
    pub jitter: f64,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
}

const MAX_JITTER: f64 = 1e-2;

/// Fits a GP to `(inputs, scores)`. Inputs closer than `1e-9` are merged and
/// their scores averaged.
pub fn gp_fit(inputs: &[Vec<f64>], scores: &[f64], hyper: GpHyper) -> Result<GpModel, HpoError> {
    if inputs.is_empty() {
        return Err(HpoError::NoTrials);
    }
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for (x, &y) in inputs.iter().zip(scores) {
        match xs.iter().position(|u| u.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() < 1e-9) {
            Some(i) => {
                sums[i].0 += y;
                sums[i].1 += 1;
            }
            None => {
                xs.push(x.clone());
                sums.push((y, 1));
            }
        }
    }
    let ys: Vec<f64> = sums.iter().map(|(s, n)| s / *n as f64).collect();
    let (mean, std) = mean_std(&ys);
    let std = if std > 0.0 { std } else { 1.0 };
    let targets: Vec<f64> = ys.iter().map(|y| (y - mean) / std).collect();
    let n = xs.len();
    let base = DMatrix::from_fn(n, n, |i, j| hyper.kernel(&xs[i], &xs[j]) + if i == j { hyper.noise } else { 0.0 });
    let mut jitter = 0.0;
    let chol = loop {
        let k = &base + DMatrix::identity(n, n) * jitter;
        if let Some(c) = k.cholesky() {
            break c;
        }
        jitter = if jitter == 0.0 { 1e-8 } else { jitter * 10.0 };
        if jitter > MAX_JITTER {
            return Err(HpoError::Factorization(jitter / 10.0));
        }
    };
    let alpha = chol.solve(&DVector::from_column_slice(&targets));
    Ok(GpModel { inputs: xs, targets, score_mean: mean, score_std: std, hyper, jitter, chol, alpha })
}

/// Predictive mean and variance (standardized units) at `x`.
pub fn gp_posterior(model: &GpModel, x: &[f64]) -> (f64, f64) {
    let k = DVector::from_iterator(model.inputs.len(), model.inputs.iter().map(|u| model.hyper.kernel(u, x)));
    let mean = k.dot(&model.alpha);
    let v = model.chol.l().solve_lower_triangular(&k).expect("triangular factor");
    let var = model.hyper.kernel(x, x) - v.dot(&v);
    (mean, var.max(0.0))
}

/// Expected improvement over `best` for maximization.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let sd = variance.max(0.0).sqrt();
    let gain = mean - best;
    if sd == 0.0 {
        return gain.max(0.0);
    }
    let z = gain / sd;
    let n = Normal::standard();
    (gain * n.cdf(z) + sd * n.pdf(z)).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoOptions {
    /// Prior samples drawn before the first GP fit.
    pub n_init: usize,
    pub candidate_pool: usize,
    pub gp: GpHyper,
}

impl Default for BoOptions {
    fn default() -> Self {
        Self { n_init: 3, candidate_pool: 1024, gp: GpHyper::default() }
    }
}

/// Next configuration to evaluate given `history`.
pub fn bo_step(history: &[Trial], space: &SearchSpace, seed: u64, options: &BoOptions) -> Result<Vec<i64>, HpoError> {
    let step = history.len() as u64;
    if history.len() < options.n_init {
        return Ok(space.sample(&mut rng_for(seed, "bo-init", step)));
    }
    let inputs: Vec<Vec<f64>> = history.iter().map(|t| space.normalize(&t.config)).collect();
    let scores: Vec<f64> = history.iter().map(|t| t.score).collect();
    let gp = gp_fit(&inputs, &scores, options.gp)?;
    let best = gp.targets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut rng = rng_for(seed, "bo-pool", step);
    let mut pool: Vec<Vec<i64>> = (0..options.candidate_pool.max(1)).map(|_| space.sample(&mut rng)).collect();
    let mut chosen = 0;
    let mut chosen_ei = f64::NEG_INFINITY;
    for (i, c) in pool.iter().enumerate() {
        let (m, v) = gp_posterior(&gp, &space.normalize(c));
        let ei = expected_improvement(m, v, best);
        if ei > chosen_ei {
            chosen = i;
            chosen_ei = ei;
        }
    }
    Ok(pool.swap_remove(chosen))
}

/// Runs `budget` sequential BO evaluations of `objective`.
pub fn bayes_optimize<E>(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    options: &BoOptions,
    mut objective: impl FnMut(&[i64]) -> Result<f64, E>,
) -> Result<Vec<Trial>, E>
where
    E: From<HpoError>,
{
    let mut history = Vec::with_capacity(budget);
    for _ in 0..budget {
        let config = bo_step(&history, space, seed, options)?;
        let score = objective(&config)?;
        history.push(Trial { config, score });
    }
    Ok(history)
}

/// `budget` independent prior samples, for comparison with [`bayes_optimize`].
pub fn random_search<E>(space: &SearchSpace, budget: usize, seed: u64, mut objective: impl FnMut(&[i64]) -> Result<f64, E>) -> Result<Vec<Trial>, E> {
    let mut rng = rng_for(seed, "random-search", 0);
    (0..budget)
        .map(|_| {
            let config = space.sample(&mut rng);
            objective(&config).map(|score| Trial { config, score })
        })
        .collect()
}

/// First trial with the highest score.
pub fn best_trial(trials: &[Trial]) -> Option<&Trial> {
    trials.iter().fold(None, |best: Option<&Trial>, t| match best {
        Some(b) if b.score >= t.score => Some(b),
        _ => Some(t),
    })
}

/// Trains on one index set and scores another.
pub trait Evaluator: Sync {
    /// `P(AD)` for every index of `eval`, after fitting `config` on `train`.
    fn fit_predict(&self, config: &[i64], train: &[usize], eval: &[usize], seed: u64) -> Result<Vec<f64>, HpoError>;
}

/// Applies a search-space point to `base`. `n_groups` is lowered to the
/// largest divisor of `n_heads` not above it.
pub fn retformer_config_from_point(space: &SearchSpace, point: &[i64], base: &RetformerConfig) -> RetformerConfig {
    let mut cfg = base.clone();
    for (d, &v) in space.dims.iter().zip(point) {
        let v = v.max(1) as usize;
        match d.name.as_str() {
            "d_model" => cfg.d_model = v,
            "patch_size" => cfg.patch_size = v.min(cfg.image_size),
            "n_layers" => cfg.n_layers = v,
            "n_heads" => cfg.n_heads = v,
            "n_groups" => cfg.n_groups = v,
            "mlp_hidden_1" => cfg.mlp_hidden_1 = v,
            "mlp_hidden_2" => cfg.mlp_hidden_2 = v,
            _ => {}
        }
    }
    cfg.n_groups = (1..=cfg.n_groups.min(cfg.n_heads)).rev().find(|g| cfg.n_heads % g == 0).unwrap_or(1);
    cfg.d_head = default_d_head(cfg.d_model, cfg.n_heads);
    cfg
}

/// Trains a Retformer per call on subsets of `dataset`.
pub struct RetformerEvaluator<'a> {
    pub dataset: &'a Dataset,
    pub space: &'a SearchSpace,
    pub base: RetformerConfig,
    pub train: TrainConfig,
}

impl Evaluator for RetformerEvaluator<'_> {
    fn fit_predict(&self, config: &[i64], train: &[usize], eval: &[usize], seed: u64) -> Result<Vec<f64>, HpoError> {
        let model = retformer_config_from_point(self.space, config, &self.base);
        let tc = TrainConfig { seed, ..self.train.clone() };
        let (params, _) = train_model(&self.dataset.subset(train), &model, &tc)?;
        let scores = predict_scores(&params, &model, &self.dataset.subset(eval))?;
        Ok(scores.into_iter().map(|(s, _)| s).collect())
    }
}

fn fraction_correct(scores: &[f64], labels: &[Label], indices: &[usize]) -> f64 {
    let hits = scores.iter().zip(indices).filter(|(&s, &i)| (s >= 0.5) == (labels[i] == Label::Ad)).count();
    hits as f64 / indices.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    pub budget: usize,
    pub k1: usize,
    pub k2: usize,
    pub seed: u64,
    pub group_by_subject: bool,
    pub bo: BoOptions,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self { budget: 15, k1: 3, k2: 3, seed: 0, group_by_subject: false, bo: BoOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerTrial {
    pub config: Vec<i64>,
    /// Validation accuracy per inner fold.
    pub fold_scores: Vec<f64>,
    pub mean_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterResult {
    pub fold: usize,
    pub trials: Vec<InnerTrial>,
    pub best_config: Vec<i64>,
    pub test_metrics: ClassificationMetrics,
    pub test_auc: Option<f64>,
    /// Outer-test scores and labels of the retrained winner.
    pub test_scores: Vec<(f64, Label)>,
}

/// Record of which indices each inner evaluation touched.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub inner_evaluations: usize,
    /// Inner evaluations that saw an index of their outer test fold.
    pub violations: usize,
}

impl LeakageAudit {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub space: SearchSpace,
    pub outer: Vec<OuterResult>,
    pub audit: LeakageAudit,
}

impl TuneReport {
    pub fn test_accuracies(&self) -> Vec<f64> {
        self.outer.iter().filter_map(|o| o.test_metrics.accuracy).collect()
    }

    /// Mean and population standard deviation of outer-test accuracy.
    pub fn accuracy_mean_std(&self) -> (f64, f64) {
        mean_std(&self.test_accuracies())
    }

    /// One row per outer fold plus a `mean±std` row of percentages.
    pub fn summary_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.10}"));
        let mut out = String::from("outer");
        for d in &self.space.dims {
            let _ = write!(out, ",{}", d.name);
        }
        out.push_str(",accuracy,precision,sensitivity,specificity,f1,auc\n");
        for o in &self.outer {
            let m = &o.test_metrics;
            let _ = write!(out, "{}", o.fold);
            for v in &o.best_config {
                let _ = write!(out, ",{v}");
            }
            let cells = [m.accuracy, m.precision, m.sensitivity, m.specificity, m.f1, o.test_auc].map(cell);
            let _ = writeln!(out, ",{}", cells.join(","));
        }
        let column = |f: fn(&OuterResult) -> Option<f64>| -> String {
            let v: Vec<f64> = self.outer.iter().filter_map(f).collect();
            if v.is_empty() { String::new() } else { format_mean_std_percent(&v) }
        };
        out.push_str("mean±std");
        out.push_str(&",".repeat(self.space.dims.len()));
        let cells = [
            column(|o| o.test_metrics.accuracy),
            column(|o| o.test_metrics.precision),
            column(|o| o.test_metrics.sensitivity),
            column(|o| o.test_metrics.specificity),
            column(|o| o.test_metrics.f1),
            column(|o| o.test_auc),
        ];
        let _ = writeln!(out, ",{}", cells.join(","));
        out
    }

    /// `outer,trial,<dimensions>,fold_0..,mean`.
    pub fn trials_csv(&self) -> String {
        let k2 = self.outer.first().and_then(|o| o.trials.first()).map_or(0, |t| t.fold_scores.len());
        let mut out = String::from("outer,trial");
        for d in &self.space.dims {
            let _ = write!(out, ",{}", d.name);
        }
        for j in 0..k2 {
            let _ = write!(out, ",fold_{j}");
        }
        out.push_str(",mean\n");
        for o in &self.outer {
            for (t, trial) in o.trials.iter().enumerate() {
                let _ = write!(out, "{},{}", o.fold, t);
                for v in &trial.config {
                    let _ = write!(out, ",{v}");
                }
                for s in &trial.fold_scores {
                    let _ = write!(out, ",{s:.10}");
                }
                let _ = writeln!(out, ",{:.10}", trial.mean_score);
            }
        }
        out
    }
}

/// Nested cross-validation over a precomputed `plan`: BO on mean inner
/// validation accuracy, then the winner is refitted on all non-test indices
/// and scored once on the outer test fold.
pub fn nested_cv_tune_plan(
    plan: &SplitPlan,
    labels: &[Label],
    space: &SearchSpace,
    evaluator: &impl Evaluator,
    options: &TuneOptions,
) -> Result<TuneReport, HpoError> {
    space.validate()?;
    let mut audit = LeakageAudit::default();
    let mut outer_results = Vec::with_capacity(plan.outer.len());
    for (o, split) in plan.outer.iter().enumerate() {
        let mut in_test = vec![false; plan.n];
        split.test.iter().for_each(|&i| in_test[i] = true);
        let bo_seed = substream(options.seed, "bo", o as u64);
        let mut trials: Vec<InnerTrial> = Vec::new();
        let history = bayes_optimize(space, options.budget, bo_seed, &options.bo, |config| -> Result<f64, HpoError> {
            let t = trials.len() as u64;
            let fold_scores = split
                .inner
                .par_iter()
                .enumerate()
                .map(|(j, inner)| {
                    let seed = substream(options.seed, "inner-fit", (o as u64) << 32 | t << 8 | j as u64);
                    let scores = evaluator.fit_predict(config, &inner.train, &inner.validation, seed)?;
                    Ok(fraction_correct(&scores, labels, &inner.validation))
                })
                .collect::<Result<Vec<f64>, HpoError>>()?;
            for inner in &split.inner {
                audit.inner_evaluations += 1;
                if inner.train.iter().chain(&inner.validation).any(|&i| in_test[i]) {
                    audit.violations += 1;
                }
            }
            let mean_score = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
            trials.push(InnerTrial { config: config.to_vec(), fold_scores, mean_score });
            Ok(mean_score)
        })?;
        let best = best_trial(&history).ok_or(HpoError::NoTrials)?.config.clone();
        let development = split.development();
        let seed = substream(options.seed, "outer-fit", o as u64);
        let scores = evaluator.fit_predict(&best, &development, &split.test, seed)?;
        let test_labels: Vec<Label> = split.test.iter().map(|&i| labels[i]).collect();
        let counts = confusion(&scores, &test_labels, 0.5).map_err(|e| HpoError::Evaluation(e.to_string()))?;
        outer_results.push(OuterResult {
            fold: o,
            trials,
            best_config: best,
            test_metrics: classification_metrics(&counts),
            test_auc: auc(&scores, &test_labels).ok(),
            test_scores: scores.into_iter().zip(test_labels).collect(),
        });
    }
    Ok(TuneReport { space: space.clone(), outer: outer_results, audit })
}

/// [`nested_cv_tune_plan`] on a freshly planned `k1 × k2` split of `dataset`.
pub fn nested_cv_tune(dataset: &Dataset, space: &SearchSpace, evaluator: &impl Evaluator, options: &TuneOptions) -> Result<TuneReport, HpoError> {
    let plan = dataset.nested_folds(options.k1, options.k2, substream(options.seed, "folds", 0), options.group_by_subject)?;
    nested_cv_tune_plan(&plan, &dataset.labels(), space, evaluator, options)
}
