use freqsense_harness::stats::{pearson, spearman};

/// Reference values from scipy.stats (spearmanr example in its documentation).
#[test]
fn spearman_matches_reference_with_ties() {
    let rho = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 6.0, 7.0, 8.0, 7.0]);
    assert!((rho - 0.8207826816681233).abs() < 1e-12, "{rho}");
}

#[test]
fn pearson_closed_form() {
    // sum dx*dy = 6, sum dx^2 = 10, sum dy^2 = 6
    let r = pearson(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 5.0, 4.0, 5.0]);
    let expected = 6.0 / (10.0f64 * 6.0).sqrt();
    assert!((r - expected).abs() < 1e-12, "{r} vs {expected}");
}

#[test]
fn spearman_is_invariant_to_monotone_maps() {
    let x: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64).collect();
    let y: Vec<f64> = x.iter().map(|v| (v * 0.3).sin() + v * 0.1).collect();
    let y_exp: Vec<f64> = y.iter().map(|v| v.exp()).collect();
    assert!((spearman(&x, &y) - spearman(&x, &y_exp)).abs() < 1e-12);
}
