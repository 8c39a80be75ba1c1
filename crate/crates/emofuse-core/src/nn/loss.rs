//! Class-weighted softmax cross-entropy.

use super::Scalar;
use crate::error::{Error, Result};
use crate::manifest::{ClassWeights, EmotionLabel, NUM_CLASSES};
use ndarray::Array2;

const LOG_FLOOR: f64 = 1e-12;

/// Row-wise softmax with max subtraction for overflow safety.
pub fn softmax_rows<S: Scalar>(logits: &Array2<S>) -> Array2<S> {
    let (b, k) = logits.dim();
    let mut probs = Array2::from_elem((b, k), S::ZERO);
    for i in 0..b {
        let row = logits.row(i);
        let mut max = row[0];
        for &v in row.iter().skip(1) {
            max = max.maximum(v);
        }
        let mut denom = S::ZERO;
        for j in 0..k {
            let e = (row[j] - max).exp();
            probs[[i, j]] = e;
            denom += e;
        }
        for j in 0..k {
            probs[[i, j]] = probs[[i, j]] / denom;
        }
    }
    probs
}

/// Softmax over each logit row, then the mean over the batch of each
/// instance's class-weighted negative log-likelihood.
///
/// Returns (loss, probabilities, dloss/dlogits). The probability fed to
/// the log is floored at 1e-12; the gradient is the standard softmax
/// cross-entropy gradient scaled per instance by its class weight and the
/// 1/B batch mean factor.
pub fn weighted_softmax_xent<S: Scalar>(
    logits: &Array2<S>,
    labels: &[EmotionLabel],
    weights: &ClassWeights,
) -> Result<(S, Array2<S>, Array2<S>)> {
    let (b, k) = logits.dim();
    if k != NUM_CLASSES {
        return Err(Error::shape(
            "weighted_softmax_xent",
            format!("logit width {k}, expected {NUM_CLASSES}"),
        ));
    }
    if labels.len() != b {
        return Err(Error::shape(
            "weighted_softmax_xent",
            format!("{} labels for {b} rows", labels.len()),
        ));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Model("non-finite logits in loss".into()));
    }

    let probs = softmax_rows(logits);
    let mut dlogits = Array2::from_elem((b, k), S::ZERO);
    let mut loss = S::ZERO;
    let inv_b = S::from_f64(1.0 / b as f64);

    for i in 0..b {
        let y = labels[i].index();
        let w = S::from_f64(weights.weight(labels[i]));
        let p = probs[[i, y]].maximum(S::from_f64(LOG_FLOOR));
        loss += w * -(p.ln()) * inv_b;

        for j in 0..k {
            let indicator = if j == y { S::ONE } else { S::ZERO };
            dlogits[[i, j]] = w * inv_b * (probs[[i, j]] - indicator);
        }
    }
    Ok((loss, probs, dlogits))
}
