//! Path-style annotations to target and mask bit-strings.
//!
//! A present category always has its root positive. Nodes below a non-leaf
//! terminal positive are masked (the annotator stopped early), and every other
//! unannotated node is a negative, including siblings of annotated branches.
//! An absent category is masked entirely.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;

/// Separator between paths inside one CSV cell.
pub const PATH_LIST_SEPARATOR: char = ';';

/// Labels of one sample for one category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryLabels {
    pub category: String,
    pub present: bool,
    pub targets: Vec<bool>,
    pub mask: Vec<bool>,
}

impl CategoryLabels {
    /// Fully masked labels for a category the sample has no annotation for.
    pub fn absent(h: &Hierarchy) -> Self {
        CategoryLabels {
            category: h.category().to_string(),
            present: false,
            targets: vec![false; h.len()],
            mask: vec![true; h.len()],
        }
    }

    /// Labels from ancestor-closed targets, with the mask derived from them.
    /// All-zero targets mean the category is absent.
    pub fn from_targets(h: &Hierarchy, targets: Vec<bool>) -> Result<Self> {
        if !targets.iter().any(|&b| b) {
            if targets.len() != h.len() {
                return Err(Error::dims("targets", h.len(), targets.len()));
            }
            return Ok(Self::absent(h));
        }
        let mask = derive_mask(h, &targets)?;
        Ok(CategoryLabels {
            category: h.category().to_string(),
            present: true,
            targets,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn unmasked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }
}

/// All labels of one sample, one entry per category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub sample_id: String,
    pub categories: Vec<CategoryLabels>,
}

impl AnnotationSet {
    pub fn get(&self, category: &str) -> Option<&CategoryLabels> {
        self.categories.iter().find(|c| c.category == category)
    }

    /// True when no category contributes any unmasked bit.
    pub fn fully_masked(&self) -> bool {
        self.categories.iter().all(|c| c.mask.iter().all(|&m| m))
    }
}

/// Parses the annotation of one category. An empty list means the category
/// is absent for this sample.
pub fn parse_annotation<S: AsRef<str>>(h: &Hierarchy, paths: &[S]) -> Result<CategoryLabels> {
    if paths.is_empty() {
        return Ok(CategoryLabels::absent(h));
    }
    let mut targets = vec![false; h.len()];
    for p in paths {
        let p = p.as_ref();
        let node = h.find(p).ok_or_else(|| Error::UnknownPath {
            path: p.to_string(),
            category: h.category().to_string(),
        })?;
        targets[node] = true;
    }
    h.close_bits(&mut targets);
    CategoryLabels::from_targets(h, targets)
}

/// Paths of the terminal positives; parses back to the same labels.
pub fn serialize_annotation(h: &Hierarchy, labels: &CategoryLabels) -> Vec<String> {
    if !labels.present {
        return Vec::new();
    }
    h.terminal_positives(&labels.targets)
        .into_iter()
        .map(|i| h.path(i))
        .collect()
}

/// Mask for ancestor-closed targets: strict descendants of every non-leaf
/// terminal positive.
pub fn derive_mask(h: &Hierarchy, targets: &[bool]) -> Result<Vec<bool>> {
    h.check_closed(targets)?;
    let mut mask = vec![false; h.len()];
    for t in h.terminal_positives(targets) {
        for d in h.subtree(t).skip(1) {
            mask[d] = !targets[d];
        }
    }
    Ok(mask)
}

/// Stacks one category of a batch into `B x n` target and mask matrices.
pub fn encode_batch(
    annotations: &[AnnotationSet],
    h: &Hierarchy,
) -> Result<(Array2<bool>, Array2<bool>)> {
    let n = h.len();
    let mut targets = Array2::from_elem((annotations.len(), n), false);
    let mut mask = Array2::from_elem((annotations.len(), n), false);
    for (row, a) in annotations.iter().enumerate() {
        let labels = a.get(h.category()).ok_or_else(|| {
            Error::CategoryMismatch(format!(
                "sample `{}` has no entry for category `{}`",
                a.sample_id,
                h.category()
            ))
        })?;
        if labels.len() != n || labels.mask.len() != n {
            return Err(Error::CategoryMismatch(format!(
                "sample `{}`: category `{}` has {} bits, hierarchy has {n}",
                a.sample_id,
                h.category(),
                labels.len()
            )));
        }
        for i in 0..n {
            targets[[row, i]] = labels.targets[i];
            mask[[row, i]] = labels.mask[i];
        }
    }
    Ok((targets, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{catami, random_tree};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const ROCK: &str = "Substrate > Consolidated (hard) > Rock";
    const PEBBLE: &str = "Substrate > Unconsolidated (soft) > Pebble / gravel";
    const PEBBLE_BIO: &str = "Substrate > Unconsolidated (soft) > Pebble / gravel > Biologenic";

    fn positives(l: &CategoryLabels) -> Vec<usize> {
        (0..l.len()).filter(|&i| l.targets[i]).collect()
    }

    #[test]
    fn multi_path_annotation() {
        let h = catami::substrate();
        let l = parse_annotation(&h, &[ROCK, PEBBLE]).unwrap();
        assert!(l.present);
        let rock = h.find(ROCK).unwrap();
        let pebble = h.find(PEBBLE).unwrap();
        let expected: Vec<usize> = {
            let mut v: Vec<usize> = h
                .ancestors_inclusive(rock)
                .chain(h.ancestors_inclusive(pebble))
                .collect();
            v.sort();
            v.dedup();
            v
        };
        assert_eq!(positives(&l), expected);
        // Rock is a leaf; pebble/gravel is not, so its subtree is masked.
        let masked: Vec<usize> = (0..h.len()).filter(|&i| l.mask[i]).collect();
        assert_eq!(masked, h.subtree(pebble).skip(1).collect::<Vec<_>>());
    }

    #[test]
    fn missing_category_is_fully_masked() {
        let h = catami::substrate();
        let l = parse_annotation::<&str>(&h, &[]).unwrap();
        assert!(!l.present);
        assert!(l.mask.iter().all(|&m| m));
        assert!(l.targets.iter().all(|&t| !t));
    }

    #[test]
    fn root_only_annotation() {
        let h = catami::substrate();
        let l = parse_annotation(&h, &["Substrate"]).unwrap();
        assert_eq!(positives(&l), [0]);
        assert_eq!(l.unmasked_count(), 1);
    }

    #[test]
    fn unknown_path() {
        let h = catami::substrate();
        assert!(matches!(
            parse_annotation(&h, &["Substrate > Lava"]),
            Err(Error::UnknownPath { .. })
        ));
    }

    #[test]
    fn mask_examples() {
        let chain = Hierarchy::parse("root > a > b").unwrap();
        assert_eq!(
            derive_mask(&chain, &[true, true, false]).unwrap(),
            [false, false, true]
        );
        assert_eq!(
            derive_mask(&chain, &[true, true, true]).unwrap(),
            [false; 3]
        );
        assert!(matches!(
            derive_mask(&chain, &[true, false, true]),
            Err(Error::NonClosedTargets { node: 2, parent: 1 })
        ));
    }

    #[test]
    fn mixed_depth_paths_mask_only_the_early_one() {
        // Full-depth rock path plus a path stopping at the depth-three
        // biologenic node under pebble / gravel.
        let h = catami::substrate();
        let l = parse_annotation(&h, &[ROCK, PEBBLE_BIO]).unwrap();
        let oracle = brute_force_mask(&h, &l.targets);
        assert_eq!(l.mask, oracle);
        let bio = h.find(PEBBLE_BIO).unwrap();
        assert_eq!(
            (0..h.len()).filter(|&i| l.mask[i]).collect::<Vec<_>>(),
            h.subtree(bio).skip(1).collect::<Vec<_>>()
        );
        // Siblings such as boulders stay unmasked negatives.
        let boulders = h.find("Substrate > Consolidated (hard) > Boulders").unwrap();
        assert!(!l.mask[boulders] && !l.targets[boulders]);
    }

    /// Mask rule evaluated node by node: masked iff negative and some strict
    /// ancestor is a positive none of whose children are positive.
    fn brute_force_mask(h: &Hierarchy, targets: &[bool]) -> Vec<bool> {
        (0..h.len())
            .map(|v| {
                !targets[v]
                    && h.ancestors_inclusive(v).skip(1).any(|a| {
                        targets[a] && h.children(a).iter().all(|&c| !targets[c])
                    })
            })
            .collect()
    }

    #[test]
    fn encode_batch_rows() {
        let sub = catami::substrate();
        let rel = catami::relief();
        let mk = |id: &str, s: &[&str], r: &[&str]| AnnotationSet {
            sample_id: id.into(),
            categories: vec![
                parse_annotation(&sub, s).unwrap(),
                parse_annotation(&rel, r).unwrap(),
            ],
        };
        let batch = vec![
            mk("a", &[ROCK], &["Relief > Flat (0-10cm)"]),
            mk("b", &[PEBBLE], &[]),
            mk("c", &[], &["Relief"]),
        ];
        let (t, m) = encode_batch(&batch, &sub).unwrap();
        assert_eq!(t.dim(), (3, 24));
        assert!(m.row(2).iter().all(|&x| x));
        assert!(m.row(0).iter().all(|&x| !x));
        assert_ne!(m.row(0), m.row(1));
        for (row, a) in batch.iter().enumerate() {
            let expected = derive_mask(&sub, &a.categories[0].targets).unwrap();
            if a.categories[0].present {
                assert_eq!(m.row(row).to_vec(), expected);
            }
        }

        let (_, m) = encode_batch(&batch, &rel).unwrap();
        assert!(m.row(1).iter().all(|&x| x));
        assert!(matches!(
            encode_batch(&batch, &catami::bedforms()),
            Err(Error::CategoryMismatch(_))
        ));
    }

    #[test]
    fn leaf_annotations_give_zero_mask() {
        let h = catami::relief();
        let rows: Vec<AnnotationSet> = (1..h.len())
            .map(|i| AnnotationSet {
                sample_id: i.to_string(),
                categories: vec![parse_annotation(&h, &[h.path(i)]).unwrap()],
            })
            .collect();
        let (_, m) = encode_batch(&rows, &h).unwrap();
        assert!(m.iter().all(|&x| !x));
    }

    proptest! {
        #[test]
        fn mask_properties(seed in any::<u64>(), n in 1usize..30, picks in proptest::collection::vec(any::<prop::sample::Index>(), 1..5)) {
            let h = random_tree(n, &mut ChaCha8Rng::seed_from_u64(seed));
            let paths: Vec<String> = picks.iter().map(|p| h.path(p.index(n))).collect();
            let l = parse_annotation(&h, &paths).unwrap();
            prop_assert!(h.is_closed(&l.targets));
            prop_assert_eq!(&l.mask, &brute_force_mask(&h, &l.targets));
            for i in 0..n {
                prop_assert!(!(l.mask[i] && l.targets[i]));
                // Ancestors of positives are never masked.
                if l.targets[i] {
                    for a in h.ancestors_inclusive(i) {
                        prop_assert!(!l.mask[a]);
                    }
                }
                // Unannotated siblings of an annotated branch are negatives.
                if let Some(p) = h.parent(i) {
                    let sibling_annotated = h.children(p).iter().any(|&c| l.targets[c]);
                    if !l.targets[i] && sibling_annotated {
                        prop_assert!(!l.mask[i]);
                    }
                }
            }
            let back = parse_annotation(&h, &serialize_annotation(&h, &l)).unwrap();
            prop_assert_eq!(back, l);
        }
    }
}
