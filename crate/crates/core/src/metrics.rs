//! Classification metrics, ROC analysis, two-sample t-tests and the power of
//! a k-fold paired comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::data::Label;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("both classes must be present")]
    SingleClass,
    #[error("{0}")]
    InvalidInput(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_lengths(scores: &[f64], labels: &[Label]) -> Result<(), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    Ok(())
}

/// Tallies predictions, where a score `≥ threshold` predicts AD.
pub fn confusion(scores: &[f64], labels: &[Label], threshold: f64) -> Result<ConfusionCounts, MetricsError> {
    check_lengths(scores, labels)?;
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == Label::Ad) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Each metric is `None` when its denominator is zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_metrics(c: &ConfusionCounts) -> ClassificationMetrics {
    ClassificationMetrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision: ratio(c.tp, c.tp + c.fp),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `≥ threshold` count as positive; `+∞` marks the origin.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points from a sweep over every distinct score, highest first, preceded
/// by the `(0, 0)` sentinel. The last point is `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<Vec<RocPoint>, MetricsError> {
    check_lengths(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricsError::InvalidInput("scores must not be NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l == Label::Ad).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == Label::Ad {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    Ok(points)
}

/// Trapezoidal area under [`roc_curve`].
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64, MetricsError> {
    let pts = roc_curve(scores, labels)?;
    Ok(pts.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum())
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        let t = if p.threshold.is_infinite() { "inf".to_string() } else { format!("{:.10}", p.threshold) };
        let _ = writeln!(out, "{t},{:.10},{:.10}", p.fpr, p.tpr);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Student (`equal_variance`) or Welch two-sample t-test of `mean(a) - mean(b)`.
pub fn two_sample_t_test(a: &[f64], b: &[f64], equal_variance: bool) -> Result<TTest, MetricsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricsError::InvalidInput("each sample needs at least two values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        if ma == mb {
            return Ok(TTest { t: 0.0, p: 1.0, df: (a.len() + b.len() - 2) as f64 });
        }
        return Err(MetricsError::InvalidInput("both samples have zero variance".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (se, df) = if equal_variance {
        let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
        ((pooled * (1.0 / na + 1.0 / nb)).sqrt(), na + nb - 2.0)
    } else {
        let (qa, qb) = (va / na, vb / nb);
        ((qa + qb).sqrt(), (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0)))
    };
    let t = (ma - mb) / se;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| MetricsError::InvalidInput(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}

/// Paired t-test of `mean(a - b)` against zero.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, MetricsError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(MetricsError::InvalidInput("paired samples need equal lengths of at least two".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (m, v) = mean_var(&d);
    if v == 0.0 {
        return Err(MetricsError::InvalidInput("paired differences have zero variance".into()));
    }
    let df = (d.len() - 1) as f64;
    let t = m / (v / d.len() as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| MetricsError::InvalidInput(e.to_string()))?;
    Ok(TTest { t, p: (2.0 * dist.cdf(-t.abs())).min(1.0), df })
}

/// Degrees of freedom of a `k`-fold comparison.
pub fn degrees_of_freedom(k: usize) -> usize {
    k.saturating_sub(1)
}

/// CDF of the noncentral t distribution with `df` degrees of freedom and
/// noncentrality `delta`, by Lenth's series (AS 243).
pub fn noncentral_t_cdf(t: f64, df: f64, delta: f64) -> f64 {
    const ERRMAX: f64 = 1e-12;
    const ITRMAX: usize = 2000;
    let std_normal = Normal::standard();
    let (tt, del, negate) = if t < 0.0 { (-t, -delta, true) } else { (t, delta, false) };
    let mut tnc = 0.0;
    let x = tt * tt / (tt * tt + df);
    if x > 0.0 {
        let lambda = del * del;
        let mut p = 0.5 * (-0.5 * lambda).exp();
        let mut q = (2.0 / std::f64::consts::PI).sqrt() * p * del;
        let mut s = 0.5 - p;
        let mut a = 0.5;
        let b = 0.5 * df;
        let rxb = (1.0 - x).powf(b);
        let albeta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
        let mut xodd = beta_reg(a, b, x);
        let mut godd = 2.0 * rxb * (a * x.ln() - albeta).exp();
        let mut xeven = 1.0 - rxb;
        let mut geven = b * x * rxb;
        tnc = p * xodd + q * xeven;
        for en in 1..=ITRMAX {
            a += 1.0;
            xodd -= godd;
            xeven -= geven;
            godd *= x * (a + b - 1.0) / a;
            geven *= x * (a + b - 0.5) / (a + 0.5);
            p *= lambda / (2.0 * en as f64);
            q *= lambda / (2.0 * en as f64 + 1.0);
            s -= p;
            tnc += p * xodd + q * xeven;
            if 2.0 * s * (xodd - godd) <= ERRMAX {
                break;
            }
        }
    }
    tnc += std_normal.cdf(-del);
    let out = if negate { 1.0 - tnc } else { tnc };
    out.clamp(0.0, 1.0)
}

/// One-sided power of a `k`-fold paired t-test at effect size `es`:
/// `1 - F_T(t_crit; k-1, es·√k)`.
pub fn t_power(es: f64, k: usize, alpha: f64) -> Result<f64, MetricsError> {
    if k < 2 {
        return Err(MetricsError::InvalidInput(format!("power needs k >= 2, got {k}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(MetricsError::InvalidInput(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let df = degrees_of_freedom(k) as f64;
    let central = StudentsT::new(0.0, 1.0, df).map_err(|e| MetricsError::InvalidInput(e.to_string()))?;
    let t_crit = central.inverse_cdf(1.0 - alpha);
    Ok(1.0 - noncentral_t_cdf(t_crit, df, es * (k as f64).sqrt()))
}

/// Per-test significance threshold for `m` comparisons.
pub fn bonferroni(alpha: f64, m: usize) -> f64 {
    alpha / m.max(1) as f64
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (m, (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// `"92% ± 2%"` for fractions `[0.9, 0.94]`.
pub fn format_mean_std_percent(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{:.0}% ± {:.0}%", 100.0 * m, 100.0 * s)
}
