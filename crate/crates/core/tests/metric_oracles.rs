use msml::metrics::{
    build_report, disease_vs_disease_auc, macro_auc, normal_vs_disease_auc, roc_auc, weighted_auc, ScoreMatrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{brute_d_auc, brute_force_auc as brute_force, brute_n_auc, six_sample_fixture, weighted_fixture};

#[test]
fn rank_auc_equals_brute_force_exactly_on_tied_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(2..60);
        // Few distinct levels force heavy ties.
        let levels = rng.random_range(1..8);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
        match brute_force(&scores, &labels) {
            Some(expected) => {
                assert_eq!(roc_auc(&scores, &labels).unwrap(), expected, "{scores:?} {labels:?}");
                checked += 1;
            }
            None => assert!(roc_auc(&scores, &labels).is_err()),
        }
    }
}

#[test]
fn auc_is_invariant_to_monotone_transforms_and_complements() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = 40;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..12) as f64) / 12.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let a = roc_auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        assert_eq!(roc_auc(&warped, &labels).unwrap(), a);
        let flipped: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        assert!((roc_auc(&flipped, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
    }
}

#[test]
fn d_auc_matches_filtered_brute_force() {
    let sm = six_sample_fixture();
    assert!((disease_vs_disease_auc(&sm).unwrap() - brute_d_auc(&sm)).abs() < 1e-15);
}

#[test]
fn n_auc_matches_brute_force_against_normals() {
    let sm = six_sample_fixture();
    assert!((normal_vs_disease_auc(&sm).unwrap() - brute_n_auc(&sm)).abs() < 1e-15);
}

#[test]
fn w_auc_fixture() {
    let sm = weighted_fixture();
    assert_eq!(weighted_auc(&sm).unwrap(), 0.875);
    assert_eq!(macro_auc(&sm).unwrap(), 0.75);
}

#[test]
fn without_normals_d_auc_is_macro_and_n_auc_undefined() {
    let scores = vec![vec![0.9, 0.2], vec![0.4, 0.8], vec![0.6, 0.6], vec![0.3, 0.7]];
    let labels = vec![vec![1, 0], vec![0, 1], vec![1, 1], vec![0, 1]];
    let sm = ScoreMatrix::from_rows(&scores, &labels).unwrap();
    assert_eq!(disease_vs_disease_auc(&sm).unwrap(), macro_auc(&sm).unwrap());
    assert!(normal_vs_disease_auc(&sm).is_err());
}

#[test]
fn report_aggregates_agree_with_their_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let (n, c) = (30, 4);
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| rng.random::<f64>()).collect()).collect();
        let labels: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..c).map(|_| u8::from(rng.random_bool(0.3))).collect())
            .collect();
        let report = build_report(&ScoreMatrix::from_rows(&scores, &labels).unwrap());
        let defined: Vec<(f64, f64)> = report
            .per_class_auc
            .iter()
            .zip(&report.class_weights)
            .filter_map(|(a, w)| a.map(|a| (a, *w)))
            .collect();
        if defined.is_empty() {
            continue;
        }
        let macro_ = defined.iter().map(|(a, _)| a).sum::<f64>() / defined.len() as f64;
        let weighted = defined.iter().map(|(a, w)| a * w).sum::<f64>() / defined.iter().map(|(_, w)| w).sum::<f64>();
        assert!((report.macro_auc.unwrap() - macro_).abs() < 1e-12);
        assert!((report.w_auc.unwrap() - weighted).abs() < 1e-12);
        assert!((report.class_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let back = msml::metrics::MetricsReport::from_json(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
