//! Convergence fit and normality test against values frozen from SciPy
//! (`scipy.optimize.curve_fit`, `scipy.stats.shapiro`).

use ndo_ness::observables::{fit_exponential, residual_histogram, shapiro_wilk};

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs()
}

#[test]
fn exponential_fit_matches_curve_fit() {
    let series: Vec<(f64, f64)> = (0..100)
        .map(|i| {
            let t = 3.0 * i as f64;
            (t, 0.05 + 0.3 * 0.97f64.powf(t) + 0.002 * (7.3 * t + 0.4).sin())
        })
        .collect();
    let fit = fit_exponential(&series).unwrap();
    assert!(!fit.degenerate);
    assert!(close(fit.limit, 0.05001964352266876, 1e-6), "{}", fit.limit);
    assert!(close(fit.amplitude, 0.300139412791349, 1e-6), "{}", fit.amplitude);
    assert!(close(fit.rate, 0.969977969937448, 1e-8), "{}", fit.rate);
    assert!(close(fit.residual_rms, 0.0014224388083426372, 1e-5), "{}", fit.residual_rms);
    assert!(close(fit.limit_se, 0.00019244503359288118, 0.05), "{}", fit.limit_se);
    assert!(close(fit.rate_se, 0.00013719643446631947, 0.05), "{}", fit.rate_se);
    assert_eq!(fit.residuals.len(), series.len());
    let counted: usize = residual_histogram(&fit.residuals, 12).iter().map(|b| b.count).sum();
    assert_eq!(counted, series.len());
}

#[test]
fn fit_recovers_noiseless_decay_from_late_start() {
    let series: Vec<(f64, f64)> = (100..400).map(|t| (t as f64, -0.2 + 1.5 * 0.995f64.powi(t))).collect();
    let fit = fit_exponential(&series).unwrap();
    assert!(close(fit.limit, -0.2, 1e-7));
    assert!(close(fit.rate, 0.995, 1e-9));
}

#[test]
fn fit_rejects_short_or_nonfinite_series() {
    let short: Vec<(f64, f64)> = (0..5).map(|t| (t as f64, 1.0)).collect();
    assert!(fit_exponential(&short).is_err());
    let mut bad: Vec<(f64, f64)> = (0..20).map(|t| (t as f64, 0.5f64.powi(t))).collect();
    bad[3].1 = f64::NAN;
    assert!(fit_exponential(&bad).is_err());
}

#[test]
fn shapiro_wilk_matches_scipy() {
    let x: Vec<f64> = (0..50).map(|k| (1.7 * k as f64 + 0.3).sin() + 0.1 * k as f64).collect();
    let y: Vec<f64> = (0..20).map(|k| ((37 * k) % 101) as f64 / 101.0).collect();
    let z: Vec<f64> = (0..30).map(|k| (0.15 * k as f64).exp()).collect();
    for (data, w_ref, p_ref) in [
        (&x, 0.9769387219472863, 0.4312823468905529),
        (&y, 0.9530042132550299, 0.4150039254447618),
        (&z, 0.7912791375970559, 4.565448037222257e-05),
    ] {
        let (w, p) = shapiro_wilk(data).unwrap();
        assert!((w - w_ref).abs() < 1e-4, "W {w} vs {w_ref}");
        assert!(close(p, p_ref, 0.02), "p {p} vs {p_ref}");
    }
}

#[test]
fn shapiro_wilk_is_invariant_under_affine_maps() {
    let x: Vec<f64> = (0..40).map(|k| (0.9 * k as f64).cos() * (1.0 + 0.05 * k as f64)).collect();
    let y: Vec<f64> = x.iter().map(|v| 3.0 - 250.0 * v).collect();
    let (a, b) = (shapiro_wilk(&x).unwrap(), shapiro_wilk(&y).unwrap());
    assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-10);
}
