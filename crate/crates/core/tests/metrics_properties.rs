use proptest::prelude::*;
use retformer::data::Label;
use retformer::metrics::*;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

/// Mann–Whitney estimate of P(score_AD > score_HC) with ties counted half.
fn pairwise_auc(scores: &[f64], labels: &[Label]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &a) in scores.iter().enumerate() {
        for (j, &b) in scores.iter().enumerate() {
            if labels[i] == Label::Ad && labels[j] == Label::Hc {
                pairs += 1.0;
                wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

/// `∫ Φ(t·w/√ν − δ) · f(w) dw` over `w = √u`, `u ~ χ²_ν`, by composite Simpson.
fn noncentral_t_by_quadrature(t: f64, df: f64, delta: f64) -> f64 {
    let phi = Normal::standard();
    let log_norm = (df / 2.0) * std::f64::consts::LN_2 + ln_gamma(df / 2.0);
    let density = |w: f64| if w <= 0.0 { if df == 1.0 { 2.0 * (-log_norm).exp() } else { 0.0 } } else {
        (std::f64::consts::LN_2 + (df - 1.0) * w.ln() - w * w / 2.0 - log_norm).exp()
    };
    let f = |w: f64| phi.cdf(t * w / df.sqrt() - delta) * density(w);
    let (upper, n) = (60.0, 200_000);
    let h = upper / n as f64;
    let mut acc = f(0.0) + f(upper);
    for i in 1..n {
        acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[test]
fn noncentral_t_matches_quadrature_and_reference_values() {
    let reference = [
        (2.919985580355516, 2.0, 4.763139720814412, 0.10428028688059815),
        (1.5, 4.0, 0.7, 0.7350601233028798),
        (-0.8, 7.0, 1.3, 0.021218112439784206),
        (3.0, 1.0, 2.0, 0.5248571617336879),
        (0.3, 12.0, -1.1, 0.9179296196432689),
    ];
    for (t, df, delta, expected) in reference {
        let series = noncentral_t_cdf(t, df, delta);
        assert!((series - expected).abs() < 1e-8, "{t} {df} {delta}: {series} vs {expected}");
        let quad = noncentral_t_by_quadrature(t, df, delta);
        assert!((series - quad).abs() < 1e-8, "{t} {df} {delta}: {series} vs quadrature {quad}");
    }
    let power = t_power(2.75, 3, 0.05).unwrap();
    assert!((power - 0.8957197131194019).abs() < 1e-8);
    assert!(power >= 0.80);
}

#[test]
fn power_grows_with_effect_and_folds() {
    let mut last = 0.0;
    for es in [0.0, 0.5, 1.0, 2.0, 3.0] {
        let p = t_power(es, 3, 0.05).unwrap();
        assert!(p >= last);
        last = p;
    }
    assert!(t_power(1.0, 10, 0.05).unwrap() > t_power(1.0, 3, 0.05).unwrap());
    assert!(t_power(1.0, 1, 0.05).is_err());
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
    (2usize..=50).prop_flat_map(|n| {
        (
            // Coarse scores so that ties are common.
            prop::collection::vec((0u8..12).prop_map(|v| v as f64 / 11.0), n),
            prop::collection::vec(any::<bool>(), n).prop_map(|b| b.into_iter().map(|x| if x { Label::Ad } else { Label::Hc }).collect()),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn trapezoid_auc_equals_pairwise_oracle((scores, labels) in instance()) {
        prop_assume!(labels.contains(&Label::Ad) && labels.contains(&Label::Hc));
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn roc_points_are_monotone((scores, labels) in instance()) {
        prop_assume!(labels.contains(&Label::Ad) && labels.contains(&Label::Hc));
        let pts = roc_curve(&scores, &labels).unwrap();
        prop_assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        prop_assert_eq!((pts.last().unwrap().fpr, pts.last().unwrap().tpr), (1.0, 1.0));
        for w in pts.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
        }
    }

    #[test]
    fn metrics_lie_in_unit_interval(tp in 0usize..50, fp in 0usize..50, tn in 0usize..50, fn_ in 0usize..50) {
        let c = ConfusionCounts { tp, fp, tn, fn_ };
        prop_assume!(c.total() > 0);
        let m = classification_metrics(&c);
        for v in [m.accuracy, m.precision, m.sensitivity, m.specificity, m.f1].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(m.accuracy.unwrap(), (tp + tn) as f64 / c.total() as f64);
        if let (Some(p), Some(r)) = (m.precision, m.sensitivity) {
            if p + r > 0.0 {
                prop_assert!((m.f1.unwrap() - 2.0 * p * r / (p + r)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn t_test_is_antisymmetric(
        a in prop::collection::vec(-10.0f64..10.0, 2..20),
        b in prop::collection::vec(-10.0f64..10.0, 2..20),
        equal in any::<bool>(),
    ) {
        let ab = two_sample_t_test(&a, &b, equal);
        let ba = two_sample_t_test(&b, &a, equal);
        if let (Ok(ab), Ok(ba)) = (ab, ba) {
            prop_assert!((ab.t + ba.t).abs() < 1e-12 * (1.0 + ab.t.abs()));
            prop_assert!((ab.p - ba.p).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab.p));
        }
    }
}
