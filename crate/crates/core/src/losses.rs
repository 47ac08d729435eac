//! Sigmoid cross-entropy, the multi-label softmax loss (MSML), and the
//! weighted objective that combines them with the fine-grained head.
//!
//! Every loss returns the scalar together with its gradient with respect to
//! the logits, dense over all classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::sigmoid_scalar;

/// Binary ground truth for one sample.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector {
    bits: Vec<u8>,
}

impl LabelVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Parameter(format!("labels must be 0 or 1, got {bits:?}")));
        }
        Ok(LabelVector { bits })
    }

    /// Labels with the given positive class indices set.
    pub fn from_positives(num_classes: usize, positives: &[usize]) -> Result<Self> {
        let mut bits = vec![0; num_classes];
        for &c in positives {
            if c >= num_classes {
                return Err(Error::Parameter(format!(
                    "class {c} out of range for {num_classes} classes"
                )));
            }
            bits[c] = 1;
        }
        Ok(LabelVector { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_positive(&self, class: usize) -> bool {
        self.bits[class] == 1
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b == 0).map(|(i, _)| i)
    }

    pub fn num_positives(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// True when no class is present.
    pub fn is_normal(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }
}

/// Pre-activation classifier outputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    values: Vec<f64>,
}

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("logits must be finite".into()));
        }
        Ok(Logits { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Weights of the combined objective `alpha * (msml + ce) + beta * fce`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.2, beta: 0.6 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Parameter(format!(
                "loss weights must be finite and nonnegative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

fn check_lengths(logits: &Logits, labels: &LabelVector) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Summed per-class sigmoid cross-entropy. The gradient is `sigmoid(x) - y`.
pub fn sigmoid_bce(logits: &Logits, labels: &LabelVector) -> Result<(f64, Vec<f64>)> {
    check_lengths(logits, labels)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.values().iter().zip(labels.bits()) {
        let y = f64::from(y);
        // -y log s(x) - (1-y) log(1-s(x)) = softplus(x) - y x
        loss += softplus(x) - y * x;
        grad.push(sigmoid_scalar(x) - y);
    }
    Ok((loss, grad))
}

/// Multi-label softmax loss.
///
/// For each positive class `l`, a softmax restricted to `{l} ∪ negatives`
/// gives `p_l`; the loss is `-mean_l log p_l`. Samples without positives
/// contribute zero loss and zero gradient.
pub fn msml(logits: &Logits, labels: &LabelVector) -> Result<(f64, Vec<f64>)> {
    check_lengths(logits, labels)?;
    let x = logits.values();
    let mut grad = vec![0.0; x.len()];
    let n_pos = labels.num_positives();
    if n_pos == 0 {
        return Ok((0.0, grad));
    }
    let neg: Vec<usize> = labels.negatives().collect();
    if neg.is_empty() {
        return Ok((0.0, grad));
    }

    // log-sum-exp over the negative logits, shared by every positive term
    let neg_max = neg.iter().map(|&k| x[k]).fold(f64::NEG_INFINITY, f64::max);
    let neg_lse = neg_max + neg.iter().map(|&k| (x[k] - neg_max).exp()).sum::<f64>().ln();

    // With N = log Σ_neg e^{x_k}: -log p_l = softplus(N - x_l) and
    // 1 - p_l = sigmoid(N - x_l), both accurate even when p_l ≈ 1.
    let neg_share: Vec<f64> = neg.iter().map(|&k| (x[k] - neg_lse).exp()).collect();
    let scale = 1.0 / n_pos as f64;
    let mut loss = 0.0;
    for l in labels.positives() {
        let d = neg_lse - x[l];
        let miss = sigmoid_scalar(d);
        loss += softplus(d);
        grad[l] -= scale * miss;
        for (&k, share) in neg.iter().zip(&neg_share) {
            grad[k] += scale * share * miss;
        }
    }
    Ok((loss * scale, grad))
}

/// `alpha * (msml + ce) + beta * fce`.
pub fn total_loss(ce: f64, msml: f64, fce: f64, weights: LossWeights) -> f64 {
    weights.alpha * (msml + ce) + weights.beta * fce
}
