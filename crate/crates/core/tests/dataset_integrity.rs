use std::collections::HashSet;

use msml::dataset::{
    class_template, generate, load, save, split, ChannelStats, Fold, GeneratorSpec, Sample, SplitSpec, BACKGROUND_LEVEL,
};
use msml::metrics::roc_auc;

fn large() -> Vec<Sample> {
    generate(&GeneratorSpec {
        num_samples: 10_000,
        seed: 17,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn label_marginals_match_the_generative_model() {
    let spec = GeneratorSpec::default();
    let samples = large();
    let n = samples.len() as f64;
    for c in 0..spec.num_classes {
        // P(c) = (1 - normal) * (p_c + Σ_{(a, c, boost)} p_a * boost).
        let boosted: f64 = spec
            .cooccurrence
            .iter()
            .filter(|(_, b, _)| *b == c)
            .map(|&(a, _, boost)| spec.class_prevalence[a] * boost)
            .sum();
        let expected = (1.0 - spec.normal_fraction) * (spec.class_prevalence[c] + boosted);
        let observed = samples.iter().filter(|s| s.labels.is_positive(c)).count() as f64 / n;
        let se = (expected * (1.0 - expected) / n).sqrt();
        assert!(
            (observed - expected).abs() <= 3.0 * se,
            "class {c}: {observed} vs {expected} ± {se}"
        );
    }
}

#[test]
fn cooccurrence_boost_is_measurable() {
    let samples = large();
    for &(a, b, _) in &GeneratorSpec::default().cooccurrence {
        let rate = |with_a: bool| {
            let pool: Vec<&Sample> = samples.iter().filter(|s| s.labels.is_positive(a) == with_a).collect();
            let hits = pool.iter().filter(|s| s.labels.is_positive(b)).count() as f64;
            (hits / pool.len() as f64, pool.len() as f64)
        };
        let ((p1, n1), (p0, n0)) = (rate(true), rate(false));
        let se = (p1 * (1.0 - p1) / n1 + p0 * (1.0 - p0) / n0).sqrt();
        assert!(p1 - p0 > 3.0 * se, "pair ({a}, {b}): {p1} vs {p0}");
    }
}

/// Solves `g x = r` by Gaussian elimination with partial pivoting.
fn solve(mut g: Vec<Vec<f64>>, mut r: Vec<f64>) -> Vec<f64> {
    let n = r.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| g[i][col].abs().total_cmp(&g[j][col].abs()))
            .unwrap();
        g.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..n {
            let f = g[row][col] / g[col][col];
            let pivot_row = g[col].clone();
            for (dst, src) in g[row].iter_mut().zip(&pivot_row).skip(col) {
                *dst -= f * src;
            }
            r[row] -= f * r[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| g[row][k] * x[k]).sum();
        x[row] = (r[row] - s) / g[row][row];
    }
    x
}

#[test]
fn noiseless_templates_are_linearly_separable() {
    let spec = GeneratorSpec {
        noise_sigma: 0.0,
        seed: 4,
        ..Default::default()
    };
    let samples = generate(&spec).unwrap();
    let (c, h, w) = (spec.num_classes, spec.image_height, spec.image_width);
    let t: Vec<Vec<f64>> = (0..c).map(|k| class_template(k, c, h, w)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gram: Vec<Vec<f64>> = t.iter().map(|a| t.iter().map(|b| dot(a, b)).collect()).collect();
    for k in 0..c {
        // Dual basis probe: coefficients solving G a = e_k, probe = Σ a_j T_j.
        let mut e = vec![0.0; c];
        e[k] = 1.0;
        let a = solve(gram.clone(), e);
        let probe: Vec<f64> = (0..h * w).map(|p| (0..c).map(|j| a[j] * t[j][p]).sum()).collect();
        let scores: Vec<f64> = samples
            .iter()
            .map(|s| {
                let centred: Vec<f64> = s.image.data().iter().map(|v| v - BACKGROUND_LEVEL).collect();
                dot(&probe, &centred)
            })
            .collect();
        let labels: Vec<u8> = samples.iter().map(|s| u8::from(s.labels.is_positive(k))).collect();
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0, "class {k}");
    }
}

#[test]
fn grouped_splits_never_leak_groups() {
    let samples = generate(&GeneratorSpec::default()).unwrap();
    for seed in 0..10 {
        let idx = split(
            &samples,
            &SplitSpec {
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let groups = |fold| {
            idx.take(fold, &samples)
                .iter()
                .map(|s| s.group_id)
                .collect::<HashSet<_>>()
        };
        let (tr, va, te) = (groups(Fold::Train), groups(Fold::Val), groups(Fold::Test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        assert_eq!(idx.train.len() + idx.val.len() + idx.test.len(), samples.len());
    }
}

#[test]
fn default_dataset_round_trips_bit_exactly() {
    let samples = generate(&GeneratorSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save(&samples, dir.path()).unwrap();
    let back = load(dir.path()).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.group_id, b.group_id);
        let same_bits = a
            .image
            .data()
            .iter()
            .zip(b.image.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same_bits);
    }
}

#[test]
fn train_fold_is_standardised() {
    let samples = generate(&GeneratorSpec {
        num_samples: 300,
        num_groups: 30,
        ..Default::default()
    })
    .unwrap();
    let idx = split(&samples, &SplitSpec::default()).unwrap();
    let mut train: Vec<Sample> = idx.take(Fold::Train, &samples).into_iter().cloned().collect();
    let stats = ChannelStats::compute(&train).unwrap();
    stats.apply_all(&mut train).unwrap();
    let values: Vec<f64> = train.iter().flat_map(|s| s.image.data().to_vec()).collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    assert!(mean.abs() < 1e-10);
    assert!((var.sqrt() - 1.0).abs() < 1e-10);
}
