//! Synthetic datasets with controlled missing information.
//!
//! Ground truth comes from a root-down walk: every child of an included node
//! is included with `branch_prob`, and when none is picked one child is
//! chosen uniformly, so every ground-truth path ends at a leaf. Features are
//! one noisy indicator column per node followed by pure-noise distractors.
//!
//! Observed annotations degrade the ground truth in two ways: each component
//! path is cut back to a uniformly chosen shallower node with probability
//! `missing_precision_rate`, and each category is dropped with probability
//! `missing_category_rate`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotationSet, CategoryLabels};
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::rng::{streams, substream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub noise_sigma: f64,
    pub branch_prob: f64,
    pub missing_precision_rate: f64,
    pub missing_category_rate: f64,
    /// Defaults to the node count plus a third, leaving a quarter of the
    /// columns as distractors.
    pub feature_dim: Option<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_samples: 5000,
            noise_sigma: 0.1,
            branch_prob: 0.3,
            missing_precision_rate: 0.3,
            missing_category_rate: 0.2,
            feature_dim: None,
        }
    }
}

impl GeneratorConfig {
    pub fn resolved_feature_dim(&self, total_nodes: usize) -> usize {
        self.feature_dim.unwrap_or((total_nodes * 4).div_ceil(3))
    }

    fn validate(&self, total_nodes: usize) -> Result<()> {
        for (name, value) in [
            ("branch_prob", self.branch_prob),
            ("missing_precision_rate", self.missing_precision_rate),
            ("missing_category_rate", self.missing_category_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::InvalidRate {
                    name: name.into(),
                    value,
                });
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        let feature_dim = self.resolved_feature_dim(total_nodes);
        if feature_dim < total_nodes {
            return Err(Error::DimTooSmall {
                feature_dim,
                nodes: total_nodes,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_ids: Vec<String>,
    pub features: Array2<f64>,
    pub observed: Vec<AnnotationSet>,
    pub ground_truth: Vec<AnnotationSet>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            sample_ids: indices.iter().map(|&i| self.sample_ids[i].clone()).collect(),
            features: self.features.select(ndarray::Axis(0), indices),
            observed: indices.iter().map(|&i| self.observed[i].clone()).collect(),
            ground_truth: indices
                .iter()
                .map(|&i| self.ground_truth[i].clone())
                .collect(),
        }
    }
}

/// Root-down walk that always reaches a leaf on every branch.
pub fn sample_ground_truth<R: Rng + ?Sized>(h: &Hierarchy, branch_prob: f64, rng: &mut R) -> Vec<bool> {
    let mut bits = vec![false; h.len()];
    bits[0] = true;
    for v in 0..h.len() {
        if !bits[v] || h.is_leaf(v) {
            continue;
        }
        let children = h.children(v);
        let mut any = false;
        for &c in children {
            if rng.random_bool(branch_prob) {
                bits[c] = true;
                any = true;
            }
        }
        if !any {
            bits[children[rng.random_range(0..children.len())]] = true;
        }
    }
    bits
}

/// Cuts each component path back to a uniformly chosen strict ancestor with
/// probability `rate`. The result is ancestor-closed and a subset of `truth`.
pub fn truncate_paths<R: Rng + ?Sized>(
    h: &Hierarchy,
    truth: &[bool],
    rate: f64,
    rng: &mut R,
) -> Vec<bool> {
    let mut out = vec![false; h.len()];
    for t in h.terminal_positives(truth) {
        let depth = h.depth(t);
        let keep = if depth > 0 && rng.random_bool(rate) {
            let cut_depth = rng.random_range(0..depth);
            h.ancestors_inclusive(t)
                .find(|&a| h.depth(a) == cut_depth)
                .expect("ancestor at every shallower depth")
        } else {
            t
        };
        out[keep] = true;
    }
    h.close_bits(&mut out);
    out
}

pub fn generate_dataset(
    hierarchies: &[Hierarchy],
    config: &GeneratorConfig,
    seed: u64,
) -> Result<Dataset> {
    let total_nodes: usize = hierarchies.iter().map(Hierarchy::len).sum();
    config.validate(total_nodes)?;
    let feature_dim = config.resolved_feature_dim(total_nodes);
    let noise = Normal::new(0.0, config.noise_sigma)
        .map_err(|e| Error::InvalidConfig(format!("noise_sigma: {e}")))?;
    let distractor = Normal::new(0.0, 1.0).expect("unit normal");

    let n = config.n_samples;
    let mut features = Array2::zeros((n, feature_dim));
    let mut observed = Vec::with_capacity(n);
    let mut ground_truth = Vec::with_capacity(n);
    let sample_ids: Vec<String> = (0..n).map(|i| format!("s{i:06}")).collect();

    for (s, id) in sample_ids.iter().enumerate() {
        let mut labels_rng = stream("labels", seed, s);
        let mut feature_rng = stream("features", seed, s);
        let mut degrade_rng = stream("degrade", seed, s);

        let mut truth_labels = Vec::with_capacity(hierarchies.len());
        let mut observed_labels = Vec::with_capacity(hierarchies.len());
        let mut col = 0;
        for h in hierarchies {
            let truth = sample_ground_truth(h, config.branch_prob, &mut labels_rng);
            for &bit in &truth {
                let indicator = if bit { 1.0 } else { 0.0 };
                features[[s, col]] = indicator + noise.sample(&mut feature_rng);
                col += 1;
            }
            let kept = truncate_paths(h, &truth, config.missing_precision_rate, &mut degrade_rng);
            let dropped = degrade_rng.random_bool(config.missing_category_rate);
            observed_labels.push(if dropped {
                CategoryLabels::absent(h)
            } else {
                CategoryLabels::from_targets(h, kept)?
            });
            truth_labels.push(CategoryLabels::from_targets(h, truth)?);
        }
        for c in col..feature_dim {
            features[[s, c]] = distractor.sample(&mut feature_rng);
        }
        ground_truth.push(AnnotationSet {
            sample_id: id.clone(),
            categories: truth_labels,
        });
        observed.push(AnnotationSet {
            sample_id: id.clone(),
            categories: observed_labels,
        });
    }

    Ok(Dataset {
        sample_ids,
        features,
        observed,
        ground_truth,
    })
}

fn stream(purpose: &str, seed: u64, sample: usize) -> StreamRng {
    substream(seed, &format!("{}/{purpose}", streams::DATA), sample as u64)
}
