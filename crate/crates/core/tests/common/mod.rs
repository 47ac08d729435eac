//! Independent oracles shared by integration tests.

#![allow(dead_code)]

use msml::metrics::ScoreMatrix;

/// Pairwise Mann–Whitney count in half-units: 2 per concordant pair, 1 per tie.
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut half_units = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            neg += 1;
            continue;
        }
        pos += 1;
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 0 {
                half_units += if si > sj {
                    2
                } else if si == sj {
                    1
                } else {
                    0
                };
            }
        }
    }
    (pos > 0 && neg > 0).then(|| half_units as f64 / (2 * pos * neg) as f64)
}

/// Brute-force AUC of `class` over the samples selected by `keep`.
pub fn brute_subset(sm: &ScoreMatrix, class: usize, keep: impl Fn(usize) -> bool) -> Option<f64> {
    let idx: Vec<usize> = (0..sm.num_samples()).filter(|&i| keep(i)).collect();
    let scores: Vec<f64> = idx.iter().map(|&i| sm.score(i, class)).collect();
    let labels: Vec<u8> = idx.iter().map(|&i| sm.label(i, class)).collect();
    brute_force_auc(&scores, &labels)
}

pub fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let defined: Vec<f64> = values.flatten().collect();
    defined.iter().sum::<f64>() / defined.len() as f64
}

pub fn has_disease(sm: &ScoreMatrix, i: usize) -> bool {
    (0..sm.num_classes()).any(|c| sm.label(i, c) == 1)
}

/// Disease-vs-disease: per class, only samples with some positive label.
pub fn brute_d_auc(sm: &ScoreMatrix) -> f64 {
    mean_defined((0..sm.num_classes()).map(|c| brute_subset(sm, c, |i| has_disease(sm, i))))
}

/// Normal-vs-disease: per class, its positives against all-normal samples.
pub fn brute_n_auc(sm: &ScoreMatrix) -> f64 {
    mean_defined((0..sm.num_classes()).map(|c| brute_subset(sm, c, |i| sm.label(i, c) == 1 || !has_disease(sm, i))))
}

/// Six samples: two all-normal, four with disease; two classes.
pub fn six_sample_fixture() -> ScoreMatrix {
    let scores = vec![
        vec![0.9, 0.2],
        vec![0.4, 0.8],
        vec![0.6, 0.6],
        vec![0.3, 0.7],
        vec![0.5, 0.1],
        vec![0.6, 0.3],
    ];
    let labels = vec![vec![1, 0], vec![0, 1], vec![1, 1], vec![0, 1], vec![0, 0], vec![0, 0]];
    ScoreMatrix::from_rows(&scores, &labels).unwrap()
}

/// W-AUC fixture: class 0 perfectly ranked with 3 positives, class 1 fully
/// tied with 1 positive.
pub fn weighted_fixture() -> ScoreMatrix {
    let scores = vec![vec![0.9, 0.5], vec![0.8, 0.5], vec![0.7, 0.5], vec![0.1, 0.5]];
    let labels = vec![vec![1, 1], vec![1, 0], vec![1, 0], vec![0, 0]];
    ScoreMatrix::from_rows(&scores, &labels).unwrap()
}

/// Logistic function evaluated directly, without any stabilising branches.
pub fn naive_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
