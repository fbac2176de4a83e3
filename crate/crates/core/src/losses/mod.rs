//! Training objective: label-smoothed cross-entropy plus a batch-hard triplet
//! term, `total = ce + lambda * tri`, with analytic gradients.

mod trainer;

pub use trainer::{embed_dataset, train_toy, write_trace, Objective, TraceRow, TrainConfig, TrainOutcome};

use crate::linalg::{squared_euclidean, Matrix};
use crate::{Error, Result};

/// Smoothed target: `1 - eps` on the true class, `eps / (K - 1)` elsewhere.
pub fn smooth_labels(label: usize, classes: usize, eps: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&eps) || classes < 2 {
        return Err(Error::BadEpsilon(eps));
    }
    if label >= classes {
        return Err(Error::BadLabel { label, classes });
    }
    let off = eps / (classes - 1) as f64;
    let mut p = vec![off; classes];
    p[label] = 1.0 - eps;
    Ok(p)
}

/// Row-wise `log_softmax` with max-shift.
fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}

/// Mean smoothed cross-entropy over the batch and its gradient with respect
/// to the logits, `(q_i - p_i) / N`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize], eps: f64) -> Result<(f64, Matrix)> {
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            left: n,
            right: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, k);
    for (i, &y) in labels.iter().enumerate() {
        let p = smooth_labels(y, k, eps)?;
        let logq = log_softmax(logits.row(i));
        loss -= p.iter().zip(&logq).map(|(p, lq)| p * lq).sum::<f64>();
        for ((g, lq), p) in grad.row_mut(i).iter_mut().zip(&logq).zip(&p) {
            *g = (lq.exp() - p) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Hardest positive / negative chosen for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinedTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// `d²(a, p) - d²(a, n) + margin` before the hinge.
    pub argument: f64,
}

/// Batch-hard mining on squared Euclidean distances, ties to the lowest index.
pub fn mine_batch_hard(features: &Matrix, labels: &[usize], margin: f64) -> Result<Vec<MinedTriplet>> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            left: n,
            right: labels.len(),
        });
    }
    (0..n)
        .map(|a| {
            let xa = features.row(a);
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = squared_euclidean(xa, features.row(j));
                if labels[j] == labels[a] {
                    if pos.is_none_or(|(_, best)| d > best) {
                        pos = Some((j, d));
                    }
                } else if neg.is_none_or(|(_, best)| d < best) {
                    neg = Some((j, d));
                }
            }
            let (p, dp) = pos.ok_or(Error::NoPositive(a))?;
            let (q, dn) = neg.ok_or(Error::NoNegative(a))?;
            Ok(MinedTriplet {
                anchor: a,
                positive: p,
                negative: q,
                argument: dp - dn + margin,
            })
        })
        .collect()
}

/// Mean batch-hard triplet loss and its subgradient with respect to the
/// features. The hinge contributes no gradient when its argument is <= 0.
pub fn triplet_batch_hard(features: &Matrix, labels: &[usize], margin: f64) -> Result<(f64, Matrix)> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mined = mine_batch_hard(features, labels, margin)?;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, features.cols());
    for t in mined.iter().filter(|t| t.argument > 0.0) {
        loss += t.argument;
        let (xa, xp, xn) = (
            features.row(t.anchor).to_vec(),
            features.row(t.positive).to_vec(),
            features.row(t.negative).to_vec(),
        );
        for c in 0..xa.len() {
            let gp = 2.0 * (xa[c] - xp[c]) * inv_n;
            let gn = 2.0 * (xa[c] - xn[c]) * inv_n;
            grad.row_mut(t.anchor)[c] += gp - gn;
            grad.row_mut(t.positive)[c] -= gp;
            grad.row_mut(t.negative)[c] += gn;
        }
    }
    Ok((loss * inv_n, grad))
}

/// One batch: embeddings for the triplet term, logits for the classifier.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub logits: Matrix,
}

#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: f64,
    pub ce: f64,
    pub tri: f64,
    pub grad_logits: Matrix,
    pub grad_features: Matrix,
}

/// Combines both terms; gradients of the triplet term are scaled by `lambda`.
pub fn total_loss(batch: &Batch, lambda: f64, eps: f64, margin: f64) -> Result<LossValue> {
    let (ce, grad_logits) = cross_entropy(&batch.logits, &batch.labels, eps)?;
    let (tri, mut grad_features) = triplet_batch_hard(&batch.features, &batch.labels, margin)?;
    grad_features.as_mut_slice().iter_mut().for_each(|g| *g *= lambda);
    Ok(LossValue {
        total: combine(ce, tri, lambda),
        ce,
        tri,
        grad_logits,
        grad_features,
    })
}

#[inline]
pub fn combine(ce: f64, tri: f64, lambda: f64) -> f64 {
    ce + lambda * tri
}
