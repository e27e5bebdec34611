use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{kfold, write_dataset, Dataset, Grouping, Label};
use crate::explain::{grad_cam, heatmap_for_image, masking_study, mean_attention, overlay, MaskingReport};
use crate::hpo::{nested_cv_tune, RetformerEvaluator, SearchSpace, TuneReport};
use crate::metrics::{auc, classification_metrics, confusion, format_mean_std_percent, mean_std, roc_csv, roc_curve};
use crate::model::{AblationVariant, ModelParameters, RetformerConfig};
use crate::rng::substream;
use crate::train::{accuracy, predict_scores, train_model, TrainConfig, TrainLog};

use super::{csv_text, metrics_csv, scores_csv, write_atomic, FoldMetrics, RunConfig, RunError, ScoredSample, SweepKind};

fn fold_metrics(fold: usize, scores: &[(f64, Label)]) -> Result<FoldMetrics, RunError> {
    let (s, l): (Vec<f64>, Vec<Label>) = scores.iter().copied().unzip();
    let metrics = classification_metrics(&confusion(&s, &l, 0.5)?);
    Ok(FoldMetrics { fold, metrics, auc: auc(&s, &l).ok() })
}

fn split(dataset: &Dataset, k: usize, seed: u64, group_by_subject: bool) -> Result<Vec<(Vec<usize>, Vec<usize>)>, RunError> {
    let labels = dataset.labels();
    let subjects = dataset.subjects();
    let grouping = Grouping { labels: Some(&labels), subjects: group_by_subject.then_some(&subjects[..]) };
    Ok(kfold(dataset.len(), k, seed, &grouping)?)
}

/// One trained and scored cross-validation fold.
#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub scores: Vec<(f64, Label)>,
    pub metrics: FoldMetrics,
    pub log: TrainLog,
}

#[derive(Clone, Debug)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
}

impl CvResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| accuracy(&f.scores)).collect()
    }

    pub fn mean_accuracy(&self) -> f64 {
        mean_std(&self.accuracies()).0
    }

    pub fn scored_samples(&self) -> Vec<ScoredSample> {
        self.folds
            .iter()
            .flat_map(|f| f.test.iter().zip(&f.scores).map(move |(&i, &(s, l))| (f.fold, i, s, l)))
            .collect()
    }
}

/// `k`-fold cross-validation. Folds come from the `cv-folds` substream of
/// `seed` and fold `f` trains with the `cv-fit` substream at index `f`.
pub fn cross_validate(
    dataset: &Dataset,
    model: &RetformerConfig,
    train: &TrainConfig,
    k: usize,
    seed: u64,
    group_by_subject: bool,
) -> Result<CvResult, RunError> {
    let folds = split(dataset, k, substream(seed, "cv-folds", 0), group_by_subject)?;
    let folds = folds
        .into_par_iter()
        .enumerate()
        .map(|(f, (tr, te))| {
            let tc = TrainConfig { seed: substream(seed, "cv-fit", f as u64), ..train.clone() };
            let (params, log) = train_model(&dataset.subset(&tr), model, &tc)?;
            let scores = predict_scores(&params, model, &dataset.subset(&te))?;
            let metrics = fold_metrics(f, &scores)?;
            Ok(FoldResult { fold: f, train: tr, test: te, scores, metrics, log })
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    Ok(CvResult { folds })
}

/// A model trained on the first training split of a `k1`-fold partition.
pub struct Holdout {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub params: ModelParameters<f64>,
    pub model: RetformerConfig,
    pub log: TrainLog,
    pub scores: Vec<(f64, Label)>,
}

pub fn fit_holdout(cfg: &RunConfig, dataset: &Dataset, model: &RetformerConfig, train: &TrainConfig) -> Result<Holdout, RunError> {
    let (tr, te) = split(dataset, cfg.k1, substream(cfg.seed, "holdout", 0), cfg.group_by_subject)?.swap_remove(0);
    let tc = TrainConfig { seed: substream(cfg.seed, "holdout-fit", 0), ..train.clone() };
    let (params, log) = train_model(&dataset.subset(&tr), model, &tc)?;
    let scores = predict_scores(&params, model, &dataset.subset(&te))?;
    Ok(Holdout { train: tr, test: te, params, model: model.clone(), log, scores })
}

fn write(out: &Path, name: &str, text: &str, written: &mut Vec<PathBuf>) -> Result<(), RunError> {
    let path = out.join(name);
    write_atomic(&path, text.as_bytes())?;
    written.push(path);
    Ok(())
}

fn pooled_roc(samples: &[ScoredSample]) -> Result<String, RunError> {
    let s: Vec<f64> = samples.iter().map(|r| r.2).collect();
    let l: Vec<Label> = samples.iter().map(|r| r.3).collect();
    Ok(roc_csv(&roc_curve(&s, &l)?))
}

/// Writes the synthetic dataset as class folders under `out/data` plus `samples.csv`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let Some(spec) = cfg.synth_spec(cfg.model.image_size) else {
        return Err(RunError::Config {
            key: "dataset".into(),
            origin: "synth".into(),
            message: "synth needs synth_oct or synth_fundus".into(),
        });
    };
    let dataset = crate::data::synthesize_dataset(&spec);
    let root = out.join("data");
    write_dataset(&dataset, &root, false)?;
    let mut csv = String::from("index,path,label,subject\n");
    for (i, s) in dataset.samples.iter().enumerate() {
        let _ = writeln!(csv, "{i},{}/img_{i:05}.png,{},{}", s.label.dir_name(), s.label, csv_text(&s.subject_id));
    }
    let mut written = vec![root];
    write(out, "samples.csv", &csv, &mut written)?;
    Ok(written)
}

/// Trains on one split and evaluates on the held-out fold.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let dataset = cfg.load_dataset(cfg.model.image_size)?;
    let h = fit_holdout(cfg, &dataset, &cfg.model_config(), &cfg.train_config())?;
    let samples: Vec<ScoredSample> = h.test.iter().zip(&h.scores).map(|(&i, &(s, l))| (0, i, s, l)).collect();
    let mut written = Vec::new();
    write(out, "training_log.csv", &h.log.to_csv(), &mut written)?;
    write(out, "metrics.csv", &metrics_csv(&[fold_metrics(0, &h.scores)?]), &mut written)?;
    write(out, "roc.csv", &pooled_roc(&samples)?, &mut written)?;
    write(out, "scores.csv", &scores_csv(&samples), &mut written)?;
    Ok(written)
}

/// `k1`-fold cross-validation of the configured architecture.
pub fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let dataset = cfg.load_dataset(cfg.model.image_size)?;
    let cv = cross_validate(&dataset, &cfg.model_config(), &cfg.train_config(), cfg.k1, cfg.seed, cfg.group_by_subject)?;
    let rows: Vec<FoldMetrics> = cv.folds.iter().map(|f| f.metrics.clone()).collect();
    let samples = cv.scored_samples();
    let mut written = Vec::new();
    write(out, "metrics.csv", &metrics_csv(&rows), &mut written)?;
    write(out, "roc.csv", &pooled_roc(&samples)?, &mut written)?;
    write(out, "scores.csv", &scores_csv(&samples), &mut written)?;
    Ok(written)
}

/// Nested cross-validation with Bayesian optimisation in the inner loop.
pub fn tune(cfg: &RunConfig, dataset: &Dataset) -> Result<TuneReport, RunError> {
    let space = SearchSpace::retformer();
    let evaluator = RetformerEvaluator { dataset, space: &space, base: cfg.model_config(), train: cfg.train_config() };
    Ok(nested_cv_tune(dataset, &space, &evaluator, &cfg.tune_options())?)
}

pub fn cmd_tune(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let dataset = cfg.load_dataset(cfg.model.image_size)?;
    let plan = dataset.nested_folds(cfg.k1, cfg.k2, substream(cfg.seed, "folds", 0), cfg.group_by_subject)?;
    let report = tune(cfg, &dataset)?;
    let rows: Vec<FoldMetrics> =
        report.outer.iter().map(|o| FoldMetrics { fold: o.fold, metrics: o.test_metrics, auc: o.test_auc }).collect();
    let samples: Vec<ScoredSample> = report
        .outer
        .iter()
        .zip(&plan.outer)
        .flat_map(|(o, split)| split.test.iter().zip(&o.test_scores).map(move |(&i, &(s, l))| (o.fold, i, s, l)))
        .collect();
    let mut written = Vec::new();
    write(out, "tuning.csv", &report.trials_csv(), &mut written)?;
    write(out, "tuning_summary.csv", &report.summary_csv(), &mut written)?;
    write(out, "metrics.csv", &metrics_csv(&rows), &mut written)?;
    write(out, "roc.csv", &pooled_roc(&samples)?, &mut written)?;
    write(out, "scores.csv", &scores_csv(&samples), &mut written)?;
    Ok(written)
}

/// One ablation row: the variant and its cross-validation outcome.
pub struct AblationRow {
    pub variant: AblationVariant,
    pub result: Result<CvResult, String>,
}

/// Cross-validates the baseline and every single-change variant with the
/// same folds and seeds.
pub fn ablate(cfg: &RunConfig, dataset: &Dataset) -> Vec<AblationRow> {
    let base = cfg.model.clone();
    AblationVariant::ALL
        .iter()
        .map(|&variant| {
            let model = base.clone().with_ablation(variant.apply(base.ablation));
            log::info!("ablation: {}", variant.label());
            let result = cross_validate(dataset, &model, &cfg.train_config(), cfg.ablation_folds, cfg.seed, cfg.group_by_subject)
                .map_err(|e| e.to_string());
            AblationRow { variant, result }
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("change,accuracy,std,error\n");
    for r in rows {
        match &r.result {
            Ok(cv) => {
                let (m, s) = mean_std(&cv.accuracies());
                let _ = writeln!(out, "{},{m:.10},{s:.10},", r.variant.label());
            }
            Err(e) => {
                let _ = writeln!(out, "{},,,{}", r.variant.label(), csv_text(e));
            }
        }
    }
    out
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let dataset = cfg.load_dataset(cfg.model.image_size)?;
    let rows = ablate(cfg, &dataset);
    let mut written = Vec::new();
    write(out, "ablation.csv", &ablation_csv(&rows), &mut written)?;
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    if failed > 0 {
        return Err(RunError::Partial { failed, total: rows.len(), file: out.join("ablation.csv") });
    }
    Ok(written)
}

/// Grad-CAM and attention heatmaps for the first held-out images.
pub fn cmd_explain(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let dataset = cfg.load_dataset(cfg.model.image_size)?;
    let h = fit_holdout(cfg, &dataset, &cfg.model_config(), &cfg.train_config())?;
    let dir = out.join("heatmaps");
    let mut written = Vec::new();
    let mut index = String::from("index,label,score,predicted,degenerate\n");
    for (&i, &(score, label)) in h.test.iter().zip(&h.scores).take(cfg.explain_count) {
        let image = &dataset.samples[i].pixels;
        let predicted = if score >= 0.5 { Label::Ad } else { Label::Hc };
        let cam = grad_cam(&h.params, &h.model, image, predicted, cfg.cam_target)?;
        let stem = format!("{i:05}_{label}");
        write(&dir, &format!("{stem}_gradcam.csv"), &cam.to_csv(), &mut written)?;
        let full = heatmap_for_image(&cam, &h.model);
        full.write_png(&dir.join(format!("{stem}_gradcam.png")))?;
        let blend = overlay(image, &full, 0.5)?;
        crate::data::write_png(&dir.join(format!("{stem}_overlay.png")), &blend)?;
        written.extend([dir.join(format!("{stem}_gradcam.png")), dir.join(format!("{stem}_overlay.png"))]);
        if let Ok(att) = mean_attention(&h.params, &h.model, image) {
            write(&dir, &format!("{stem}_attention.csv"), &att.to_csv(), &mut written)?;
            heatmap_for_image(&att, &h.model).write_png(&dir.join(format!("{stem}_attention.png")))?;
            written.push(dir.join(format!("{stem}_attention.png")));
        }
        let _ = writeln!(index, "{i},{label},{score:.10},{predicted},{}", cam.degenerate);
    }
    write(&dir, "index.csv", &index, &mut written)?;
    let samples: Vec<ScoredSample> = h.test.iter().zip(&h.scores).map(|(&i, &(s, l))| (0, i, s, l)).collect();
    write(out, "metrics.csv", &metrics_csv(&[fold_metrics(0, &h.scores)?]), &mut written)?;
    write(out, "scores.csv", &scores_csv(&samples), &mut written)?;
    Ok(written)
}

pub fn masking(cfg: &RunConfig, dataset: &Dataset) -> Result<MaskingReport, RunError> {
    Ok(masking_study(dataset, &cfg.model_config(), &cfg.train_config(), &cfg.masking_options())?)
}

/// Accuracy of models trained on original, Grad-CAM-masked and randomly masked images.
pub fn cmd_mask_study(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let dataset = cfg.load_dataset(cfg.model.image_size)?;
    let report = masking(cfg, &dataset)?;
    let mut written = Vec::new();
    write(out, "masking.csv", &report.repetitions_csv(), &mut written)?;
    write(out, "masking_tests.csv", &report.tests_csv(), &mut written)?;
    Ok(written)
}

/// Outcome of one sweep setting.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub setting: usize,
    /// `(train accuracy, validation accuracy)` or the failure message.
    pub result: Result<(f64, f64), String>,
}

fn sweep_point(cfg: &RunConfig, setting: usize) -> Result<(f64, f64), RunError> {
    let (mut model, mut train) = (cfg.model_config(), cfg.train_config());
    let size = match cfg.sweep_kind {
        SweepKind::ImageSize => {
            model = model.with_image_size(setting);
            model.patch_size = model.patch_size.min(setting);
            setting
        }
        SweepKind::BatchSize => {
            train.batch_size = setting;
            model.image_size
        }
    };
    let dataset = cfg.load_dataset(size)?;
    let h = fit_holdout(cfg, &dataset, &model, &train)?;
    let on_train = predict_scores(&h.params, &model, &dataset.subset(&h.train))?;
    Ok((accuracy(&on_train), accuracy(&h.scores)))
}

/// One holdout train/evaluate cycle per grid setting, with fixed seeds.
pub fn sweep(cfg: &RunConfig) -> Vec<SweepPoint> {
    cfg.grid
        .par_iter()
        .map(|&setting| SweepPoint { setting, result: sweep_point(cfg, setting).map_err(|e| e.to_string()) })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("setting,train_accuracy,validation_accuracy,error\n");
    for p in points {
        let _ = match &p.result {
            Ok((t, v)) => writeln!(out, "{},{t:.10},{v:.10},", p.setting),
            Err(e) => writeln!(out, "{},,,{}", p.setting, csv_text(e)),
        };
    }
    out
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>, RunError> {
    let points = sweep(cfg);
    let mut written = Vec::new();
    write(out, "sweep.csv", &sweep_csv(&points), &mut written)?;
    let failed = points.iter().filter(|p| p.result.is_err()).count();
    if failed > 0 {
        return Err(RunError::Partial { failed, total: points.len(), file: out.join("sweep.csv") });
    }
    Ok(written)
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| RunError::io(path, "empty file"))?;
    let header: Vec<String> = header.split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((header, rows))
}

/// Summarizes a finished run directory into `report.txt` and a pooled `roc.csv`.
pub fn cmd_report(dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let missing: Vec<String> = ["metrics.csv", "scores.csv"]
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| dir.join(f).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(RunError::MissingArtifacts(missing));
    }
    let (header, rows) = read_csv(&dir.join("metrics.csv"))?;
    let mut columns: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for row in &rows {
        for (c, v) in row.iter().enumerate().skip(1) {
            if let Ok(v) = v.parse::<f64>() {
                columns.entry(c).or_default().push(v);
            }
        }
    }
    let mut text = format!("folds: {}\n", rows.len());
    for (c, name) in header.iter().enumerate().skip(1) {
        let summary = columns.get(&c).map_or("n/a".to_string(), |v| format_mean_std_percent(v));
        let _ = writeln!(text, "{name}: {summary}");
    }

    let scores_path = dir.join("scores.csv");
    let (_, rows) = read_csv(&scores_path)?;
    let samples = rows
        .iter()
        .map(|r| {
            let score = r.get(2).and_then(|s| s.parse::<f64>().ok());
            let label = r.get(3).and_then(|s| Label::from_dir_name(s));
            match (score, label) {
                (Some(s), Some(l)) => Ok((0, 0, s, l)),
                _ => Err(RunError::io(&scores_path, format!("malformed row `{}`", r.join(",")))),
            }
        })
        .collect::<Result<Vec<ScoredSample>, _>>()?;
    let (s, l): (Vec<f64>, Vec<Label>) = samples.iter().map(|r| (r.2, r.3)).unzip();
    if let Ok(a) = auc(&s, &l) {
        let _ = writeln!(text, "pooled auc: {a:.4}");
    }
    let heatmaps = std::fs::read_dir(dir.join("heatmaps"))
        .map(|d| d.filter_map(Result::ok).filter(|e| e.path().extension().is_some_and(|x| x == "png")).count())
        .unwrap_or(0);
    if heatmaps > 0 {
        let _ = writeln!(text, "heatmaps: {heatmaps}");
    }
    let mut written = Vec::new();
    write(dir, "report.txt", &text, &mut written)?;
    write(dir, "roc.csv", &pooled_roc(&samples)?, &mut written)?;
    Ok(written)
}
