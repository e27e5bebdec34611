//! Reproducible experiments driven by a flat `key = value` configuration.
//!
//! Every command writes CSV artifacts into an output directory. All randomness
//! is derived from the configured master seed through named substreams, so two
//! invocations with the same configuration produce byte-identical files.

mod commands;
mod config;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{DataError, Label};
use crate::explain::ExplainError;
use crate::hpo::HpoError;
use crate::metrics::{ClassificationMetrics, MetricsError};
use crate::model::ModelError;
use crate::train::TrainError;

pub use commands::*;
pub use config::*;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config key `{key}` ({origin}): {message}")]
    Config { key: String, origin: String, message: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Hpo(#[from] HpoError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("missing artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),
    #[error("{failed} of {total} entries failed; see {}", .file.display())]
    Partial { failed: usize, total: usize, file: PathBuf },
}

impl RunError {
    /// Process exit code for this failure class.
    ///
    /// | code | meaning |
    /// |---|---|
    /// | 2 | invalid configuration or flags |
    /// | 3 | unreadable input or unwritable output |
    /// | 4 | model, training, tuning, metric or explanation failure |
    /// | 5 | run directory lacks required artifacts |
    /// | 6 | some sweep points or ablation rows failed |
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config { .. } => 2,
            RunError::Io { .. } | RunError::Data(_) => 3,
            RunError::Model(_) | RunError::Train(_) | RunError::Hpo(_) | RunError::Explain(_) | RunError::Metrics(_) => 4,
            RunError::MissingArtifacts(_) => 5,
            RunError::Partial { .. } => 6,
        }
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        RunError::Io { path: path.to_path_buf(), message: e.to_string() }
    }
}

/// Writes `contents` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), RunError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| RunError::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| RunError::io(path, e))?;
    tmp.persist(path).map_err(|e| RunError::io(path, e.error))?;
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.10}"))
}

/// Metrics of one evaluated fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub metrics: ClassificationMetrics,
    pub auc: Option<f64>,
}

pub fn metrics_csv(rows: &[FoldMetrics]) -> String {
    let mut out = String::from("fold,accuracy,precision,sensitivity,specificity,f1,auc\n");
    for r in rows {
        let m = &r.metrics;
        let cells = [m.accuracy, m.precision, m.sensitivity, m.specificity, m.f1, r.auc].map(cell);
        let _ = writeln!(out, "{},{}", r.fold, cells.join(","));
    }
    out
}

/// One scored sample: fold, dataset index, `P(AD)` and true label.
pub type ScoredSample = (usize, usize, f64, Label);

pub fn scores_csv(rows: &[ScoredSample]) -> String {
    let mut out = String::from("fold,index,score,label\n");
    for (fold, index, score, label) in rows {
        let _ = writeln!(out, "{fold},{index},{score:.10},{label}");
    }
    out
}

/// Commas and newlines in free text would break CSV rows.
fn csv_text(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}
