//! Masked max-constraint loss.
//!
//! Per unmasked bit `(b, i)`:
//!
//! - target 1: `-ln(max_j p[b, j])` over positive-labelled nodes `j` in the
//!   subtree of `i`;
//! - target 0: `-ln(1 - max_j p[b, j])` over unmasked nodes `j` in the subtree
//!   of `i` (the constrained output).
//!
//! Masked bits contribute nothing. A head's loss is the sum of its unmasked
//! terms divided by the number of unmasked bits in the batch, and the batch
//! loss aggregates over heads that have at least one unmasked bit.
//!
//! The gradient is routed to the winning element of each maximum; ties go to
//! the lowest node index.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::constraint::{sigmoid, subtree_argmax};
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadLoss {
    /// Mean over contributing bits; 0 when none contribute.
    pub loss: f64,
    pub contributing_bits: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadAggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_head: Vec<HeadLoss>,
    pub contributing_heads: usize,
    /// No head had an unmasked bit; the optimizer step should be skipped.
    pub skip: bool,
}

impl HeadAggregation {
    /// Weight of each contributing head's loss in the batch total.
    pub fn head_weight(self, contributing_heads: usize) -> f64 {
        match self {
            HeadAggregation::Mean if contributing_heads > 0 => 1.0 / contributing_heads as f64,
            HeadAggregation::Mean => 0.0,
            HeadAggregation::Sum => 1.0,
        }
    }
}

/// Combines head losses, ignoring heads without contributing bits.
pub fn batch_loss(per_head: &[HeadLoss], aggregation: HeadAggregation) -> LossReport {
    let contributing: Vec<&HeadLoss> = per_head
        .iter()
        .filter(|h| h.contributing_bits > 0)
        .collect();
    let weight = aggregation.head_weight(contributing.len());
    let total = contributing.iter().map(|h| h.loss).sum::<f64>() * weight;
    LossReport {
        total,
        per_head: per_head.to_vec(),
        contributing_heads: contributing.len(),
        skip: contributing.is_empty(),
    }
}

fn check_inputs(
    values: &ArrayView2<f64>,
    targets: &ArrayView2<bool>,
    mask: &ArrayView2<bool>,
    h: &Hierarchy,
) -> Result<()> {
    let n = h.len();
    if values.ncols() != n {
        return Err(Error::dims("prediction columns", n, values.ncols()));
    }
    for (name, dim) in [("targets", targets.dim()), ("mask", mask.dim())] {
        if dim.0 != values.nrows() {
            return Err(Error::dims(format!("{name} rows"), values.nrows(), dim.0));
        }
        if dim.1 != n {
            return Err(Error::dims(format!("{name} columns"), n, dim.1));
        }
    }
    for ((row, col), &m) in mask.indexed_iter() {
        if m && targets[[row, col]] {
            return Err(Error::MaskedTarget { row, col });
        }
    }
    Ok(())
}

/// For every unmasked bit, the node whose score enters its term.
fn winners<'a>(
    h: &'a Hierarchy,
    scores: &'a [f64],
    targets: &'a [bool],
    mask: &'a [bool],
) -> impl Iterator<Item = (usize, bool, usize)> + 'a {
    (0..h.len()).filter(|&i| !mask[i]).map(|i| {
        let w = if targets[i] {
            subtree_argmax(h, scores, i, |j| targets[j])
        } else {
            subtree_argmax(h, scores, i, |j| !mask[j])
        };
        (i, targets[i], w.expect("node is eligible in its own subtree"))
    })
}

/// Loss from raw sigmoid outputs. Returns the head loss and the per-bit term
/// matrix (zero at masked bits).
pub fn mc_loss(
    probs: ArrayView2<f64>,
    targets: ArrayView2<bool>,
    mask: ArrayView2<bool>,
    h: &Hierarchy,
) -> Result<(HeadLoss, Array2<f64>)> {
    check_inputs(&probs, &targets, &mask, h)?;
    for ((_, col), &value) in probs.indexed_iter() {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::ProbabilityOutOfRange { index: col, value });
        }
    }
    let mut terms = Array2::zeros(probs.dim());
    let mut sum = 0.0;
    let mut count = 0;
    for b in 0..probs.nrows() {
        let p = probs.row(b).to_vec();
        let t = targets.row(b).to_vec();
        let m = mask.row(b).to_vec();
        for (i, positive, w) in winners(h, &p, &t, &m) {
            let q = p[w].clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
            let term = if positive { -q.ln() } else { -(1.0 - q).ln() };
            terms[[b, i]] = term;
            sum += term;
            count += 1;
        }
    }
    Ok((head_loss(sum, count), terms))
}

fn head_loss(sum: f64, count: usize) -> HeadLoss {
    HeadLoss {
        loss: if count > 0 { sum / count as f64 } else { 0.0 },
        contributing_bits: count,
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Loss computed from logits with `-ln σ(x) = softplus(-x)` and
/// `-ln(1 - σ(x)) = softplus(x)`.
pub fn mc_loss_logits(
    logits: ArrayView2<f64>,
    targets: ArrayView2<bool>,
    mask: ArrayView2<bool>,
    h: &Hierarchy,
) -> Result<HeadLoss> {
    mc_loss_grad(logits, targets, mask, h).map(|(loss, _)| loss)
}

/// Head loss and its gradient with respect to the logits.
pub fn mc_loss_grad(
    logits: ArrayView2<f64>,
    targets: ArrayView2<bool>,
    mask: ArrayView2<bool>,
    h: &Hierarchy,
) -> Result<(HeadLoss, Array2<f64>)> {
    check_inputs(&logits, &targets, &mask, h)?;
    let mut grad = Array2::zeros(logits.dim());
    let mut sum = 0.0;
    let mut count = 0;
    for b in 0..logits.nrows() {
        let x = logits.row(b).to_vec();
        let t = targets.row(b).to_vec();
        let m = mask.row(b).to_vec();
        for (_, positive, w) in winners(h, &x, &t, &m) {
            let xw = x[w];
            if positive {
                sum += softplus(-xw);
                grad[[b, w]] += sigmoid(xw) - 1.0;
            } else {
                sum += softplus(xw);
                grad[[b, w]] += sigmoid(xw);
            }
            count += 1;
        }
    }
    if count > 0 {
        grad.mapv_inplace(|g| g / count as f64);
    }
    Ok((head_loss(sum, count), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::parse_annotation;
    use crate::hierarchy::random_tree;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn animal() -> Hierarchy {
        Hierarchy::parse("animal > dog\nanimal > cat").unwrap()
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let h = animal();
        let probs = array![[1.0 - 1e-12, 1.0 - 1e-12, 1e-12]];
        let t = array![[true, true, false]];
        let m = Array2::from_elem((1, 3), false);
        let (l, _) = mc_loss(probs.view(), t.view(), m.view(), &h).unwrap();
        assert!(l.loss < 1e-6, "{}", l.loss);
        let logits = array![[40.0, 40.0, -40.0]];
        let l = mc_loss_logits(logits.view(), t.view(), m.view(), &h).unwrap();
        assert!(l.loss < 1e-12);
    }

    #[test]
    fn toy_hierarchy_matches_scalar_oracle() {
        // Row 0: target animal > dog, cat negative.
        // Row 1: target animal only, dog and cat masked.
        // Row 2: category missing.
        let h = animal();
        let probs = array![[0.3, 0.8, 0.6], [0.4, 0.9, 0.7], [0.5, 0.5, 0.5]];
        let t = array![[true, true, false], [true, false, false], [false; 3]];
        let m = array![[false; 3], [false, true, true], [true; 3]];
        let (l, terms) = mc_loss(probs.view(), t.view(), m.view(), &h).unwrap();

        // animal(+): max(p_animal, p_dog) over positives = 0.8
        // dog(+): 0.8; cat(-): constrained cat = 0.6
        // row1 animal(+): only animal positive = 0.4
        let expected = [
            -(0.8f64.ln()),
            -(0.8f64.ln()),
            -(1.0f64 - 0.6).ln(),
            -(0.4f64.ln()),
        ];
        assert_eq!(l.contributing_bits, 4);
        let want = expected.iter().sum::<f64>() / 4.0;
        assert!((l.loss - want).abs() < 1e-12);
        assert!((terms[[0, 2]] + (0.4f64).ln()).abs() < 1e-12);
        assert_eq!(terms.row(2).to_vec(), [0.0; 3]);
        assert_eq!(terms[[1, 1]], 0.0);
    }

    #[test]
    fn high_negative_descendant_does_not_help_positive_parent() {
        let h = animal();
        let t = array![[true, true, false]];
        let m = Array2::from_elem((1, 3), false);
        let low = array![[0.2, 0.3, 0.1]];
        let high = array![[0.2, 0.3, 0.99]];
        let (_, a) = mc_loss(low.view(), t.view(), m.view(), &h).unwrap();
        let (_, b) = mc_loss(high.view(), t.view(), m.view(), &h).unwrap();
        assert_eq!(a[[0, 0]], b[[0, 0]]);
        assert!(b[[0, 2]] > a[[0, 2]]);
    }

    #[test]
    fn fully_masked_gives_zero_gradient() {
        let h = animal();
        let x = array![[1.0, -2.0, 0.5], [0.1, 0.2, 0.3]];
        let t = Array2::from_elem((2, 3), false);
        let m = Array2::from_elem((2, 3), true);
        let (l, g) = mc_loss_grad(x.view(), t.view(), m.view(), &h).unwrap();
        assert_eq!(l.contributing_bits, 0);
        assert_eq!(l.loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_node_reduces_to_bce_gradient() {
        let h = Hierarchy::parse("only").unwrap();
        let m = Array2::from_elem((1, 1), false);
        for (x, y) in [(0.7, true), (-1.3, false), (2.5, false)] {
            let logits = array![[x]];
            let t = array![[y]];
            let (l, g) = mc_loss_grad(logits.view(), t.view(), m.view(), &h).unwrap();
            let yv = if y { 1.0 } else { 0.0 };
            assert!((g[[0, 0]] - (sigmoid(x) - yv)).abs() < 1e-15);
            let p = sigmoid(x);
            let bce = -(yv * p.ln() + (1.0 - yv) * (1.0 - p).ln());
            assert!((l.loss - bce).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_and_probability_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_tree(12, &mut rng);
        let (x, t, m) = random_instance(&h, 6, &mut rng);
        let p = x.mapv(sigmoid);
        let (a, _) = mc_loss(p.view(), t.view(), m.view(), &h).unwrap();
        let b = mc_loss_logits(x.view(), t.view(), m.view(), &h).unwrap();
        assert_eq!(a.contributing_bits, b.contributing_bits);
        assert!((a.loss - b.loss).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let h = animal();
        let ok = Array2::from_elem((1, 3), false);
        let p = array![[0.5, 0.5]];
        assert!(matches!(
            mc_loss(p.view(), ok.view(), ok.view(), &h),
            Err(Error::DimensionMismatch { .. })
        ));
        let p = array![[0.5, 1.2, 0.5]];
        assert!(matches!(
            mc_loss(p.view(), ok.view(), ok.view(), &h),
            Err(Error::ProbabilityOutOfRange { .. })
        ));
        let p = array![[0.5, 0.5, 0.5]];
        let t = array![[true, false, false]];
        let m = array![[true, false, false]];
        assert!(matches!(
            mc_loss(p.view(), t.view(), m.view(), &h),
            Err(Error::MaskedTarget { row: 0, col: 0 })
        ));
        let short = Array2::from_elem((2, 3), false);
        assert!(matches!(
            mc_loss(p.view(), short.view(), ok.view(), &h),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn batch_loss_aggregation() {
        let hl = |loss, bits| HeadLoss {
            loss,
            contributing_bits: bits,
        };
        let r = batch_loss(&[hl(0.7, 5), hl(0.0, 0)], HeadAggregation::Mean);
        assert_eq!(r.total, 0.7);
        assert_eq!(r.contributing_heads, 1);
        assert!(!r.skip);

        let r = batch_loss(&[hl(0.3, 2), hl(0.3, 9), hl(0.3, 1)], HeadAggregation::Mean);
        assert!((r.total - 0.3).abs() < 1e-15);

        // Bit counts (4, 0, 2): only heads 1 and 3 count.
        let r = batch_loss(&[hl(0.5, 4), hl(9.0, 0), hl(0.1, 2)], HeadAggregation::Mean);
        assert!((r.total - 0.3).abs() < 1e-15);
        assert_eq!(r.contributing_heads, 2);
        let r = batch_loss(&[hl(0.5, 4), hl(9.0, 0), hl(0.1, 2)], HeadAggregation::Sum);
        assert!((r.total - 0.6).abs() < 1e-15);

        let r = batch_loss(&[hl(0.0, 0)], HeadAggregation::Mean);
        assert_eq!(r.total, 0.0);
        assert!(r.skip);
    }

    #[test]
    fn duplicating_a_masked_row_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random_tree(9, &mut rng);
        let (x, t, m) = random_instance(&h, 4, &mut rng);
        let (a, ga) = mc_loss_grad(x.view(), t.view(), m.view(), &h).unwrap();

        let mut x2 = x.clone();
        x2.push_row(x.row(0)).unwrap();
        let mut t2 = t.clone();
        t2.push_row(ndarray::Array1::from_elem(9, false).view())
            .unwrap();
        let mut m2 = m.clone();
        m2.push_row(ndarray::Array1::from_elem(9, true).view())
            .unwrap();
        let (b, gb) = mc_loss_grad(x2.view(), t2.view(), m2.view(), &h).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga.view(), gb.slice(ndarray::s![..4, ..]));
        assert!(gb.row(4).iter().all(|&v| v == 0.0));
    }

    /// Random logits with annotations drawn from random paths, some rows
    /// missing entirely.
    fn random_instance(
        h: &Hierarchy,
        batch: usize,
        rng: &mut impl Rng,
    ) -> (Array2<f64>, Array2<bool>, Array2<bool>) {
        let n = h.len();
        let x = Array2::from_shape_fn((batch, n), |_| rng.random_range(-3.0..3.0));
        let mut t = Array2::from_elem((batch, n), false);
        let mut m = Array2::from_elem((batch, n), false);
        for b in 0..batch {
            let k = rng.random_range(0..3);
            let paths: Vec<String> = (0..k).map(|_| h.path(rng.random_range(0..n))).collect();
            let l = parse_annotation(h, &paths).unwrap();
            for i in 0..n {
                t[[b, i]] = l.targets[i];
                m[[b, i]] = l.mask[i];
            }
        }
        (x, t, m)
    }
}
