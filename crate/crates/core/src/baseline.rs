//! Random-prediction baseline.
//!
//! A random prediction switches each output bit on independently and then
//! closes the result under the hierarchy, so nodes near the root light up far
//! more often than leaves: node `v` is on with probability
//! `1 - (1 - p)^s(v)` where `s(v)` is its subtree size.
//!
//! The number of distinct valid annotations (ancestor-closed subsets,
//! including the empty null label) follows `f(v) = 1 + prod_c f(c)` and is
//! computed exactly in linear time; [`brute_force_count`] enumerates all
//! `2^n` bit-strings as a cross-check.

use num_bigint::BigUint;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::AnnotationSet;
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::metrics::{evaluate, MetricsReport};
use crate::rng::{streams, substream};

/// Largest hierarchy [`brute_force_count`] accepts.
pub const BRUTE_FORCE_MAX_NODES: usize = 24;

pub const DEFAULT_TRIALS: usize = 10;
pub const DEFAULT_BIT_PROBABILITY: f64 = 0.5;

/// Exact number of ancestor-closed node subsets, null label included.
pub fn count_valid_annotations(h: &Hierarchy) -> BigUint {
    let mut f: Vec<BigUint> = vec![BigUint::from(1u32); h.len()];
    for v in (0..h.len()).rev() {
        let product = h
            .children(v)
            .iter()
            .fold(BigUint::from(1u32), |acc, &c| acc * &f[c]);
        f[v] = product + 1u32;
    }
    f.swap_remove(0)
}

/// Counts distinct closures of all `2^n` bit-strings.
pub fn brute_force_count(h: &Hierarchy) -> Result<BigUint> {
    let n = h.len();
    if n > BRUTE_FORCE_MAX_NODES {
        return Err(Error::HierarchyTooLarge {
            n,
            max: BRUTE_FORCE_MAX_NODES,
        });
    }
    let parents: Vec<u32> = (0..n)
        .map(|i| h.parent(i).map_or(0, |p| p as u32))
        .collect();
    let mut seen = vec![0u64; (1usize << n).div_ceil(64)];
    let mut distinct: u64 = 0;
    for raw in 0u32..(1u32 << n) {
        let mut closed = raw;
        for i in (1..n).rev() {
            if closed >> i & 1 == 1 {
                closed |= 1 << parents[i];
            }
        }
        let (word, bit) = (closed as usize / 64, closed % 64);
        if seen[word] >> bit & 1 == 0 {
            seen[word] |= 1 << bit;
            distinct += 1;
        }
    }
    Ok(BigUint::from(distinct))
}

/// Inclusive bounds `(n + 1, 2^n)` on the number of valid annotations of an
/// `n`-node tree. The chain attains the lower bound; the upper bound would
/// need every node to be a root.
pub fn valid_label_cardinality_bound(n: usize) -> (BigUint, BigUint) {
    (BigUint::from(n + 1), BigUint::from(1u32) << n)
}

/// Independent Bernoulli(`p`) bits, closed under the hierarchy.
pub fn sample_random_prediction<R: Rng + ?Sized>(h: &Hierarchy, p: f64, rng: &mut R) -> Vec<bool> {
    let mut bits: Vec<bool> = (0..h.len()).map(|_| rng.random_bool(p)).collect();
    h.close_bits(&mut bits);
    bits
}

/// Closed-form activation probability of every node.
pub fn activation_probability(h: &Hierarchy, p: f64) -> Vec<f64> {
    (0..h.len())
        .map(|v| 1.0 - (1.0 - p).powi(h.subtree_size(v) as i32))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    /// Trials in which the metric was defined.
    pub trials: usize,
}

impl MeanStd {
    /// Mean and sample standard deviation of the defined values.
    pub fn from_values(values: impl IntoIterator<Item = Option<f64>>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return None;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd {
            mean,
            std,
            trials: v.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub trials: usize,
    pub bit_probability: f64,
    pub seed: u64,
    pub ap: Option<MeanStd>,
    pub hml_ap: Option<MeanStd>,
    pub singular_f1: Option<MeanStd>,
    pub per_trial: Vec<MetricsReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub trials: usize,
    pub bit_probability: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            trials: DEFAULT_TRIALS,
            bit_probability: DEFAULT_BIT_PROBABILITY,
            seed: 0,
        }
    }
}

/// One random prediction per test sample per trial, scored with the full
/// metrics suite. Trial `t` draws from its own stream, so trials can run in
/// any order.
pub fn estimate_random_baseline(
    hierarchies: &[Hierarchy],
    test: &[AnnotationSet],
    config: &BaselineConfig,
) -> Result<BaselineReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.trials < 2 {
        return Err(Error::InvalidConfig(format!(
            "baseline needs at least 2 trials, got {}",
            config.trials
        )));
    }
    let p = config.bit_probability;
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidRate {
            name: "bit_probability".into(),
            value: p,
        });
    }
    let per_trial = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(config.seed, streams::BASELINE, t as u64);
            let preds: Vec<Vec<Vec<bool>>> = test
                .iter()
                .map(|_| {
                    hierarchies
                        .iter()
                        .map(|h| sample_random_prediction(h, p, &mut rng))
                        .collect()
                })
                .collect();
            evaluate(hierarchies, test, &preds)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(BaselineReport {
        trials: config.trials,
        bit_probability: p,
        seed: config.seed,
        ap: MeanStd::from_values(per_trial.iter().map(|r| r.ap)),
        hml_ap: MeanStd::from_values(per_trial.iter().map(|r| r.hml_ap)),
        singular_f1: MeanStd::from_values(per_trial.iter().map(|r| r.singular_f1)),
        per_trial,
    })
}
