//! ROC-AUC and its aggregate variants over a multi-label score matrix.
//!
//! AUC is the Mann-Whitney statistic: the fraction of (positive, negative)
//! pairs ranked correctly, with tied pairs credited one half. Classes for
//! which AUC is undefined (no positives or no negatives) are skipped from
//! aggregates and reported as `null`.

use std::cmp::Ordering;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank-sum AUC with average ranks for ties. Exact: the statistic is
/// accumulated in integer half-units before the single final division.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Parameter("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    // twice the positive rank sum; a tie block spanning 1-based ranks
    // start+1..=end has average rank (start + 1 + end) / 2
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let pos_in_block = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        twice_rank_sum += pos_in_block * (start as u64 + 1 + end as u64);
        start = end;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Scores and binary labels for `n` samples over `C` classes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    num_samples: usize,
    class_names: Vec<String>,
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl ScoreMatrix {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>, class_names: Vec<String>) -> Result<Self> {
        let c = class_names.len();
        if c == 0 {
            return Err(Error::dim("score matrix needs at least one class"));
        }
        if scores.len() != labels.len() || !scores.len().is_multiple_of(c) {
            return Err(Error::dim(format!(
                "{} scores and {} labels do not form an N x {c} matrix",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Parameter("scores must lie in [0, 1]".into()));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::Parameter("labels must be 0 or 1".into()));
        }
        Ok(ScoreMatrix {
            num_samples: scores.len() / c,
            class_names,
            scores,
            labels,
        })
    }

    /// Builds a matrix with default names `class_0 .. class_{C-1}`.
    pub fn from_rows(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<Self> {
        let c = scores.first().map_or(0, |r| r.len());
        if scores.iter().any(|r| r.len() != c) || labels.iter().any(|r| r.len() != c) {
            return Err(Error::dim("ragged score or label rows"));
        }
        Self::new(
            scores.concat(),
            labels.concat(),
            (0..c).map(|i| format!("class_{i}")).collect(),
        )
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn score(&self, sample: usize, class: usize) -> f64 {
        self.scores[sample * self.num_classes() + class]
    }

    pub fn label(&self, sample: usize, class: usize) -> u8 {
        self.labels[sample * self.num_classes() + class]
    }

    pub fn label_row(&self, sample: usize) -> &[u8] {
        let c = self.num_classes();
        &self.labels[sample * c..(sample + 1) * c]
    }

    fn is_normal(&self, sample: usize) -> bool {
        self.label_row(sample).iter().all(|&y| y == 0)
    }

    /// AUC of one class restricted to the samples accepted by `keep`.
    fn class_auc_where(&self, class: usize, keep: impl Fn(usize) -> bool) -> Result<f64> {
        let (scores, labels): (Vec<f64>, Vec<u8>) = (0..self.num_samples)
            .filter(|&i| keep(i))
            .map(|i| (self.score(i, class), self.label(i, class)))
            .unzip();
        roc_auc(&scores, &labels)
    }

    pub fn positive_counts(&self) -> Vec<usize> {
        (0..self.num_classes())
            .map(|c| (0..self.num_samples).filter(|&i| self.label(i, c) == 1).count())
            .collect()
    }
}

fn mean_defined(values: &[Option<f64>], names: &[String], what: &str) -> Result<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    for (v, name) in values.iter().zip(names) {
        if v.is_none() {
            warn!("{what}: class {name} is undefined and skipped");
        }
    }
    if defined.is_empty() {
        return Err(Error::UndefinedMetric(format!("{what}: no class is evaluable")));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Per-class AUC; `None` where a class lacks positives or negatives.
pub fn per_class_auc(sm: &ScoreMatrix) -> Vec<Option<f64>> {
    (0..sm.num_classes())
        .map(|c| sm.class_auc_where(c, |_| true).ok())
        .collect()
}

pub fn macro_auc(sm: &ScoreMatrix) -> Result<f64> {
    mean_defined(&per_class_auc(sm), sm.class_names(), "macro AUC")
}

/// Each class's share of all positive labels in the matrix.
pub fn class_weights(sm: &ScoreMatrix) -> Result<Vec<f64>> {
    let counts = sm.positive_counts();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::UndefinedMetric("no positive labels to weight classes".into()));
    }
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Prevalence-weighted AUC. Weights of undefined classes are dropped and
/// the remainder renormalised.
pub fn weighted_auc(sm: &ScoreMatrix) -> Result<f64> {
    let weights = class_weights(sm)?;
    let aucs = per_class_auc(sm);
    let (mut num, mut den) = (0.0, 0.0);
    for (w, auc) in weights.iter().zip(&aucs) {
        if let Some(a) = auc {
            num += w * a;
            den += w;
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("weighted AUC: no class is evaluable".into()));
    }
    Ok(num / den)
}

/// Per-class D-AUC values: AUC among samples carrying at least one label.
pub fn disease_vs_disease_per_class(sm: &ScoreMatrix) -> Vec<Option<f64>> {
    (0..sm.num_classes())
        .map(|c| sm.class_auc_where(c, |i| !sm.is_normal(i)).ok())
        .collect()
}

pub fn disease_vs_disease_auc(sm: &ScoreMatrix) -> Result<f64> {
    mean_defined(&disease_vs_disease_per_class(sm), sm.class_names(), "D-AUC")
}

/// Per-class N-AUC values: class positives against all-normal samples.
pub fn normal_vs_disease_per_class(sm: &ScoreMatrix) -> Vec<Option<f64>> {
    (0..sm.num_classes())
        .map(|c| sm.class_auc_where(c, |i| sm.label(i, c) == 1 || sm.is_normal(i)).ok())
        .collect()
}

pub fn normal_vs_disease_auc(sm: &ScoreMatrix) -> Result<f64> {
    if !(0..sm.num_samples()).any(|i| sm.is_normal(i)) {
        return Err(Error::UndefinedMetric(
            "N-AUC needs at least one all-normal sample".into(),
        ));
    }
    mean_defined(&normal_vs_disease_per_class(sm), sm.class_names(), "N-AUC")
}

/// All evaluation metrics for one score matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub per_class_auc: Vec<Option<f64>>,
    pub macro_auc: Option<f64>,
    pub w_auc: Option<f64>,
    pub d_auc: Option<f64>,
    pub n_auc: Option<f64>,
    pub class_weights: Vec<f64>,
    pub skipped_classes: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn build_report(sm: &ScoreMatrix) -> MetricsReport {
    let mut warnings = Vec::new();
    let mut record = |name: &str, r: Result<f64>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            warn!("{name}: {e}");
            warnings.push(format!("{name}: {e}"));
            None
        }
    };
    let per_class = per_class_auc(sm);
    let macro_auc = record("macro_auc", macro_auc(sm));
    let w_auc = record("w_auc", weighted_auc(sm));
    let d_auc = record("d_auc", disease_vs_disease_auc(sm));
    let n_auc = record("n_auc", normal_vs_disease_auc(sm));
    let class_weights = class_weights(sm).unwrap_or_else(|_| vec![0.0; sm.num_classes()]);
    let skipped_classes: Vec<String> = per_class
        .iter()
        .zip(sm.class_names())
        .filter(|(a, _)| a.is_none())
        .map(|(_, n)| n.clone())
        .collect();
    for name in &skipped_classes {
        warnings.push(format!("class {name} has undefined AUC"));
    }
    MetricsReport {
        class_names: sm.class_names().to_vec(),
        per_class_auc: per_class,
        macro_auc,
        w_auc,
        d_auc,
        n_auc,
        class_weights,
        skipped_classes,
        warnings,
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format(e.column() as u64, e.to_string()))
    }
}
