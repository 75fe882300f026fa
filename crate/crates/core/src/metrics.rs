//! Mask-aware evaluation of binarized hierarchical predictions.
//!
//! Three summary scores, each computed per category:
//!
//! - **AP**: micro-averaged average precision over every unmasked bit.
//! - **HML AP**: samples are grouped by their exact target bit-string, each
//!   group is scored with micro AP, groups are averaged within the depth of
//!   their deepest positive node, then depths are averaged.
//! - **Singular F1**: targets are split into root-to-terminal component
//!   paths; each distinct path gets a sample-level F1 (a sample predicts the
//!   path when every node on it is predicted), averaged within the depth of
//!   the path's terminal node, then across depths.
//!
//! Undefined scores (no unmasked positive, or an empty confusion table) are
//! `None` and excluded from averages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::annotations::AnnotationSet;
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One sample's binarized prediction next to its labels for one category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evaluated {
    pub pred: Vec<bool>,
    pub target: Vec<bool>,
    pub mask: Vec<bool>,
}

/// Rectangular AUPRC: `sum_k (R_k - R_{k-1}) P_k` with one threshold per
/// distinct score. `None` when there is no positive label.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut k = 0;
    while k < order.len() {
        let threshold = scores[order[k]];
        while k < order.len() && scores[order[k]] == threshold {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Micro AP over the unmasked bits of all samples.
pub fn micro_ap(samples: &[Evaluated]) -> Option<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        for i in 0..s.target.len() {
            if !s.mask[i] {
                scores.push(if s.pred[i] { 1.0 } else { 0.0 });
                labels.push(s.target[i]);
            }
        }
    }
    average_precision(&scores, &labels)
}

/// Summary score plus its per-depth breakdown.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DepthAveraged {
    pub score: Option<f64>,
    pub per_depth: BTreeMap<usize, f64>,
}

fn depth_average(entries: impl IntoIterator<Item = (usize, Option<f64>)>) -> DepthAveraged {
    let mut by_depth: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (depth, score) in entries {
        if let Some(s) = score {
            by_depth.entry(depth).or_default().push(s);
        }
    }
    let per_depth: BTreeMap<usize, f64> = by_depth
        .into_iter()
        .map(|(d, v)| (d, mean(&v)))
        .collect();
    let score = (!per_depth.is_empty())
        .then(|| mean(&per_depth.values().copied().collect::<Vec<_>>()));
    DepthAveraged { score, per_depth }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_widths(h: &Hierarchy, samples: &[Evaluated]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    for s in samples {
        for (what, len) in [
            ("prediction bits", s.pred.len()),
            ("target bits", s.target.len()),
            ("mask bits", s.mask.len()),
        ] {
            if len != h.len() {
                return Err(Error::dims(what, h.len(), len));
            }
        }
    }
    Ok(())
}

/// HML AP for one category.
pub fn hml_ap(h: &Hierarchy, samples: &[Evaluated]) -> Result<DepthAveraged> {
    check_widths(h, samples)?;
    let mut groups: BTreeMap<&[bool], Vec<Evaluated>> = BTreeMap::new();
    for s in samples {
        groups.entry(&s.target).or_default().push(s.clone());
    }
    Ok(depth_average(groups.into_iter().filter_map(|(target, members)| {
        let depth = (0..h.len()).filter(|&i| target[i]).map(|i| h.depth(i)).max()?;
        Some((depth, micro_ap(&members)))
    })))
}

/// Confusion counts for one binary decision over samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Sample-level confusion for the component path ending at `terminal`.
/// Samples with any masked node on the path are skipped.
pub fn path_confusion(h: &Hierarchy, samples: &[Evaluated], terminal: usize) -> Confusion {
    let path: Vec<usize> = h.ancestors_inclusive(terminal).collect();
    let mut c = Confusion::default();
    for s in samples {
        if path.iter().any(|&i| s.mask[i]) {
            continue;
        }
        c.add(
            path.iter().all(|&i| s.pred[i]),
            path.iter().all(|&i| s.target[i]),
        );
    }
    c
}

/// Singular F1 for one category.
pub fn singular_f1(h: &Hierarchy, samples: &[Evaluated]) -> Result<DepthAveraged> {
    check_widths(h, samples)?;
    let mut terminals: Vec<usize> = samples
        .iter()
        .flat_map(|s| h.terminal_positives(&s.target))
        .collect();
    terminals.sort_unstable();
    terminals.dedup();
    Ok(depth_average(terminals.into_iter().map(|t| {
        (h.depth(t), path_confusion(h, samples, t).f1())
    })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScores {
    pub index: usize,
    pub depth: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Unmasked samples with this node positive.
    pub support: usize,
    /// Samples where this node is unmasked.
    pub evaluated: usize,
    /// `support / evaluated`.
    pub support_fraction: Option<f64>,
}

/// Per-node precision, recall and F1 over unmasked samples.
pub fn per_node_prf(h: &Hierarchy, samples: &[Evaluated]) -> Result<Vec<NodeScores>> {
    check_widths(h, samples)?;
    Ok((0..h.len())
        .map(|i| {
            let mut c = Confusion::default();
            for s in samples.iter().filter(|s| !s.mask[i]) {
                c.add(s.pred[i], s.target[i]);
            }
            NodeScores {
                index: i,
                depth: h.depth(i),
                precision: c.precision(),
                recall: c.recall(),
                f1: c.f1(),
                support: c.tp + c.fn_,
                evaluated: c.total(),
                support_fraction: ratio(c.tp + c.fn_, c.total()),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthScores {
    pub hml_ap: Option<f64>,
    pub singular_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub ap: Option<f64>,
    pub hml_ap: Option<f64>,
    pub singular_f1: Option<f64>,
    pub per_depth: BTreeMap<usize, DepthScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub category: String,
    #[serde(flatten)]
    pub scores: NodeScores,
}

/// Full evaluation output. `ap` pools every unmasked bit of every category;
/// `hml_ap` and `singular_f1` are computed per category and then averaged
/// over categories, as is `per_depth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub samples: usize,
    pub ap: Option<f64>,
    pub hml_ap: Option<f64>,
    pub singular_f1: Option<f64>,
    pub per_depth: BTreeMap<usize, DepthScores>,
    pub per_category: BTreeMap<String, CategoryReport>,
    /// Keyed by full node path.
    pub per_node: BTreeMap<String, NodeReport>,
}

fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

/// Groups predictions and labels by category.
///
/// `predictions[s][c]` holds the bits of sample `s` for `hierarchies[c]`;
/// labels are matched to hierarchies by category name.
pub fn collect_samples(
    hierarchies: &[Hierarchy],
    annotations: &[AnnotationSet],
    predictions: &[Vec<Vec<bool>>],
) -> Result<Vec<Vec<Evaluated>>> {
    if annotations.is_empty() {
        return Err(Error::EmptyInput);
    }
    if annotations.len() != predictions.len() {
        return Err(Error::dims(
            "prediction samples",
            annotations.len(),
            predictions.len(),
        ));
    }
    hierarchies
        .iter()
        .enumerate()
        .map(|(c, h)| {
            annotations
                .iter()
                .zip(predictions)
                .map(|(a, p)| {
                    let labels = a.get(h.category()).ok_or_else(|| {
                        Error::CategoryMismatch(format!(
                            "sample `{}` has no labels for `{}`",
                            a.sample_id,
                            h.category()
                        ))
                    })?;
                    let pred = p.get(c).ok_or_else(|| {
                        Error::dims("prediction categories", hierarchies.len(), p.len())
                    })?;
                    Ok(Evaluated {
                        pred: pred.clone(),
                        target: labels.targets.clone(),
                        mask: labels.mask.clone(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Scores every category and assembles the report.
pub fn evaluate(
    hierarchies: &[Hierarchy],
    annotations: &[AnnotationSet],
    predictions: &[Vec<Vec<bool>>],
) -> Result<MetricsReport> {
    let by_category = collect_samples(hierarchies, annotations, predictions)?;
    evaluate_samples(hierarchies, &by_category)
}

pub fn evaluate_samples(
    hierarchies: &[Hierarchy],
    by_category: &[Vec<Evaluated>],
) -> Result<MetricsReport> {
    if by_category.len() != hierarchies.len() {
        return Err(Error::dims(
            "categories",
            hierarchies.len(),
            by_category.len(),
        ));
    }
    let mut per_category = BTreeMap::new();
    let mut per_node = BTreeMap::new();
    let mut depth_hml: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut depth_sf1: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (h, samples) in hierarchies.iter().zip(by_category) {
        let hml = hml_ap(h, samples)?;
        let sf1 = singular_f1(h, samples)?;
        for (&d, &v) in &hml.per_depth {
            depth_hml.entry(d).or_default().push(v);
        }
        for (&d, &v) in &sf1.per_depth {
            depth_sf1.entry(d).or_default().push(v);
        }
        for scores in per_node_prf(h, samples)? {
            per_node.insert(
                h.path(scores.index),
                NodeReport {
                    category: h.category().to_string(),
                    scores,
                },
            );
        }
        per_category.insert(
            h.category().to_string(),
            CategoryReport {
                ap: micro_ap(samples),
                hml_ap: hml.score,
                singular_f1: sf1.score,
                per_depth: merge_depths(&hml.per_depth, &sf1.per_depth),
            },
        );
    }

    let pooled: Vec<Evaluated> = by_category.iter().flatten().cloned().collect();
    let averaged = |m: &BTreeMap<usize, Vec<f64>>| -> BTreeMap<usize, f64> {
        m.iter().map(|(&d, v)| (d, mean(v))).collect()
    };
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        samples: by_category.first().map_or(0, Vec::len),
        ap: micro_ap(&pooled),
        hml_ap: mean_defined(per_category.values().map(|c| c.hml_ap)),
        singular_f1: mean_defined(per_category.values().map(|c| c.singular_f1)),
        per_depth: merge_depths(&averaged(&depth_hml), &averaged(&depth_sf1)),
        per_category,
        per_node,
    })
}

fn merge_depths(
    hml: &BTreeMap<usize, f64>,
    sf1: &BTreeMap<usize, f64>,
) -> BTreeMap<usize, DepthScores> {
    hml.keys()
        .chain(sf1.keys())
        .map(|&d| {
            (
                d,
                DepthScores {
                    hml_ap: hml.get(&d).copied(),
                    singular_f1: sf1.get(&d).copied(),
                },
            )
        })
        .collect()
}

impl MetricsReport {
    /// Mean F1 per depth over nodes with a defined F1, pooled across
    /// categories. With `support_weighted`, each node is weighted by its
    /// positive support.
    pub fn depth_f1(&self, support_weighted: bool) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for n in self.per_node.values() {
            let Some(f1) = n.scores.f1 else { continue };
            let w = if support_weighted {
                n.scores.support as f64
            } else {
                1.0
            };
            if w == 0.0 {
                continue;
            }
            let e = acc.entry(n.scores.depth).or_default();
            e.0 += w * f1;
            e.1 += w;
        }
        acc.into_iter().map(|(d, (s, w))| (d, s / w)).collect()
    }

    /// The per-node table as CSV text.
    pub fn per_node_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "category",
            "path",
            "index",
            "depth",
            "precision",
            "recall",
            "f1",
            "support",
            "evaluated",
            "support_fraction",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (path, n) in &self.per_node {
            let s = &n.scores;
            w.write_record([
                n.category.clone(),
                path.clone(),
                s.index.to_string(),
                s.depth.to_string(),
                opt(s.precision),
                opt(s.recall),
                opt(s.f1),
                s.support.to_string(),
                s.evaluated.to_string(),
                opt(s.support_fraction),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
