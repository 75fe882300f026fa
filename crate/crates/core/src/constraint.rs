//! Max-constraint over subtrees and thresholding.
//!
//! `out[i] = max { scores[j] : a_ij = 1 }`, so a parent always scores at least
//! as high as any of its descendants. Because the maximum commutes with any
//! monotone map, the same routine serves logits and probabilities.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::hierarchy::{DescendantMatrix, Hierarchy};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Row-wise maximum of the descendant-filtered scores.
pub fn constrain(r: &DescendantMatrix, scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != r.n() {
        return Err(Error::dims("scores", r.n(), scores.len()));
    }
    Ok((0..r.n())
        .map(|i| {
            r.row(i)
                .iter()
                .zip(scores)
                .filter(|(&a, _)| a)
                .map(|(_, &s)| s)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Same result as [`constrain`] in a single bottom-up pass over the tree.
pub fn constrain_tree(h: &Hierarchy, scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != h.len() {
        return Err(Error::dims("scores", h.len(), scores.len()));
    }
    let mut out = scores.to_vec();
    for i in (1..h.len()).rev() {
        let p = h.parent(i).expect("non-root node has a parent");
        out[p] = out[p].max(out[i]);
    }
    Ok(out)
}

/// [`constrain_tree`] applied to every row of a `B x n` matrix.
pub fn constrain_batch(h: &Hierarchy, scores: ArrayView2<f64>) -> Result<Array2<f64>> {
    if scores.ncols() != h.len() {
        return Err(Error::dims("score columns", h.len(), scores.ncols()));
    }
    let mut out = scores.to_owned();
    for mut row in out.rows_mut() {
        for i in (1..h.len()).rev() {
            let p = h.parent(i).expect("non-root node has a parent");
            row[p] = row[p].max(row[i]);
        }
    }
    Ok(out)
}

/// Index of the largest score within the subtree of `i` among nodes where
/// `eligible` holds. Ties resolve to the lowest index. `None` if no node in
/// the subtree is eligible.
pub fn subtree_argmax(
    h: &Hierarchy,
    scores: &[f64],
    i: usize,
    eligible: impl Fn(usize) -> bool,
) -> Option<usize> {
    let mut best: Option<usize> = None;
    for j in h.subtree(i) {
        if eligible(j) && best.is_none_or(|b| scores[j] > scores[b]) {
            best = Some(j);
        }
    }
    best
}

/// Thresholds with a strict `>`, so a score equal to the threshold is off.
pub fn binarize(probs: &[f64], threshold: f64) -> Result<Vec<bool>> {
    probs
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if (0.0..=1.0).contains(&value) {
                Ok(value > threshold)
            } else {
                Err(Error::ProbabilityOutOfRange { index, value })
            }
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logits to hierarchy-consistent bits: constrain, squash, threshold.
pub fn predict_bits(h: &Hierarchy, logits: &[f64], threshold: f64) -> Result<Vec<bool>> {
    let probs: Vec<f64> = constrain_tree(h, logits)?.into_iter().map(sigmoid).collect();
    binarize(&probs, threshold)
}
