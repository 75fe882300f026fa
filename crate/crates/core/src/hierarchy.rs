//! Category trees, pre-order indexing and the descendant matrix.
//!
//! A hierarchy file lists one root-to-node path per line, segments separated
//! by `" > "`. Every prefix of a listed path is a node. Nodes are numbered by
//! a depth-first pre-order walk in which siblings keep the order of their
//! first appearance in the file, so every subtree occupies a contiguous index
//! range `[i, i + subtree_size(i))`. Those indices are the bit positions used
//! by every downstream encoding.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};

pub const PATH_SEPARATOR: &str = " > ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub name: String,
    pub parent: Option<usize>,
    pub depth: usize,
    pub children: Vec<usize>,
    subtree_end: usize,
}

/// A rooted tree of named nodes for one category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hierarchy {
    category: String,
    nodes: Vec<Node>,
    paths: HashMap<String, usize>,
}

struct Draft {
    name: String,
    children: Vec<usize>,
}

impl Hierarchy {
    /// Parses a hierarchy file. `#` lines and blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut drafts: Vec<Draft> = Vec::new();
        let mut lookup: HashMap<(usize, String), usize> = HashMap::new();
        let mut listed: HashSet<Vec<String>> = HashSet::new();

        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let segments = split_path(line)?;
            if drafts.is_empty() {
                drafts.push(Draft {
                    name: segments[0].clone(),
                    children: Vec::new(),
                });
            } else if segments[0] != drafts[0].name {
                return Err(Error::OrphanPath {
                    path: line.to_string(),
                    root: drafts[0].name.clone(),
                });
            }
            if !listed.insert(segments.clone()) {
                return Err(Error::DuplicatePath {
                    path: segments.join(PATH_SEPARATOR),
                });
            }
            let mut current = 0;
            for name in &segments[1..] {
                current = match lookup.get(&(current, name.clone())) {
                    Some(&idx) => idx,
                    None => {
                        let idx = drafts.len();
                        drafts.push(Draft {
                            name: name.clone(),
                            children: Vec::new(),
                        });
                        drafts[current].children.push(idx);
                        lookup.insert((current, name.clone()), idx);
                        idx
                    }
                };
            }
        }

        if drafts.is_empty() {
            return Err(Error::EmptyCategory {
                category: String::new(),
            });
        }
        let names: Vec<String> = drafts.iter().map(|d| d.name.clone()).collect();
        let children: Vec<Vec<usize>> = drafts.into_iter().map(|d| d.children).collect();
        Ok(Self::from_children(names, &children))
    }

    /// Builds a hierarchy from a parent array where node 0 is the root and
    /// every parent index precedes its child. Nodes are renumbered into
    /// pre-order (siblings ordered by their original index).
    pub fn from_parents(names: Vec<String>, parents: &[Option<usize>]) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptyCategory {
                category: String::new(),
            });
        }
        if names.len() != parents.len() {
            return Err(Error::dims("parents", names.len(), parents.len()));
        }
        let mut children = vec![Vec::new(); names.len()];
        for (i, parent) in parents.iter().enumerate() {
            match (i, parent) {
                (0, None) => {}
                (0, Some(_)) => {
                    return Err(Error::InvalidConfig("node 0 must be the root".into()))
                }
                (_, None) => {
                    return Err(Error::OrphanPath {
                        path: names[i].clone(),
                        root: names[0].clone(),
                    })
                }
                (_, Some(p)) if *p >= i => return Err(Error::InvalidIndex { index: *p, len: i }),
                (_, Some(p)) => children[*p].push(i),
            }
        }
        let mut seen = HashSet::new();
        for (i, parent) in parents.iter().enumerate() {
            if !seen.insert((*parent, names[i].as_str())) {
                return Err(Error::DuplicatePath {
                    path: names[i].clone(),
                });
            }
        }
        Ok(Self::from_children(names, &children))
    }

    fn from_children(names: Vec<String>, children: &[Vec<usize>]) -> Self {
        // Iterative pre-order walk; `order[new] = old`.
        let mut order = Vec::with_capacity(names.len());
        let mut stack = vec![0usize];
        while let Some(old) = stack.pop() {
            order.push(old);
            stack.extend(children[old].iter().rev());
        }
        let mut new_index = vec![0; names.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }

        let mut nodes: Vec<Node> = order
            .iter()
            .map(|&old| Node {
                name: names[old].clone(),
                parent: None,
                depth: 0,
                children: children[old].iter().map(|&c| new_index[c]).collect(),
                subtree_end: 0,
            })
            .collect();
        for i in 0..nodes.len() {
            for c in nodes[i].children.clone() {
                nodes[c].parent = Some(i);
                nodes[c].depth = nodes[i].depth + 1;
            }
        }
        for i in (0..nodes.len()).rev() {
            nodes[i].subtree_end = nodes[i]
                .children
                .last()
                .map_or(i + 1, |&c| nodes[c].subtree_end);
        }

        let mut h = Hierarchy {
            category: nodes[0].name.clone(),
            nodes,
            paths: HashMap::new(),
        };
        h.paths = (0..h.len()).map(|i| (h.path(i), i)).collect();
        h
    }

    /// Category name; the root node's name.
    pub fn category(&self) -> &str {
        &self.category
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.nodes[i].parent
    }

    pub fn depth(&self, i: usize) -> usize {
        self.nodes[i].depth
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.nodes[i].children
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.nodes[i].children.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Index range covering `i` and all of its descendants.
    pub fn subtree(&self, i: usize) -> Range<usize> {
        i..self.nodes[i].subtree_end
    }

    pub fn subtree_size(&self, i: usize) -> usize {
        self.nodes[i].subtree_end - i
    }

    /// `i` followed by its ancestors up to the root.
    pub fn ancestors_inclusive(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::successors(Some(i), move |&j| self.nodes[j].parent)
    }

    /// Full `" > "`-joined path of node `i`.
    pub fn path(&self, i: usize) -> String {
        let mut segs: Vec<&str> = self
            .ancestors_inclusive(i)
            .map(|j| self.nodes[j].name.as_str())
            .collect();
        segs.reverse();
        segs.join(PATH_SEPARATOR)
    }

    /// Resolves a full path string to its node index.
    pub fn find(&self, path: &str) -> Option<usize> {
        let segments = split_path(path.trim()).ok()?;
        self.paths.get(&segments.join(PATH_SEPARATOR)).copied()
    }

    pub fn check_index(&self, i: usize) -> Result<()> {
        if i < self.len() {
            Ok(())
        } else {
            Err(Error::InvalidIndex {
                index: i,
                len: self.len(),
            })
        }
    }

    /// Number of nodes at each depth, root first.
    pub fn depth_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.max_depth() + 1];
        for n in &self.nodes {
            hist[n.depth] += 1;
        }
        hist
    }

    /// One path line per node in index order; parses back to the same tree.
    pub fn to_path_lines(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            let _ = writeln!(out, "{}", self.path(i));
        }
        out
    }

    /// Closes `bits` under the parent relation in place.
    pub fn close_bits(&self, bits: &mut [bool]) {
        for i in (1..bits.len()).rev() {
            if bits[i] {
                let p = self.nodes[i].parent.expect("non-root node has a parent");
                bits[p] = true;
            }
        }
    }

    /// Fails with the first positive node whose parent is negative.
    pub fn check_closed(&self, bits: &[bool]) -> Result<()> {
        if bits.len() != self.len() {
            return Err(Error::dims("bit-string", self.len(), bits.len()));
        }
        for (i, &b) in bits.iter().enumerate().skip(1) {
            let p = self.nodes[i].parent.expect("non-root node has a parent");
            if b && !bits[p] {
                return Err(Error::NonClosedTargets { node: i, parent: p });
            }
        }
        Ok(())
    }

    pub fn is_closed(&self, bits: &[bool]) -> bool {
        self.check_closed(bits).is_ok()
    }

    /// Positive nodes none of whose children are positive.
    pub fn terminal_positives(&self, bits: &[bool]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| bits[i] && !self.children(i).iter().any(|&c| bits[c]))
            .collect()
    }
}

fn split_path(line: &str) -> Result<Vec<String>> {
    let segments: Vec<String> = line
        .split(PATH_SEPARATOR)
        .map(|s| s.trim().to_string())
        .collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::MalformedPath {
            path: line.to_string(),
            reason: "empty segment".into(),
        });
    }
    Ok(segments)
}

/// The set `nodes` plus every ancestor of every member.
pub fn ancestor_closure(h: &Hierarchy, nodes: &[usize]) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for &i in nodes {
        h.check_index(i)?;
        for a in h.ancestors_inclusive(i) {
            if !out.insert(a) {
                break;
            }
        }
    }
    Ok(out)
}

/// Binary matrix with `a[i][j] = 1` iff node `j` is node `i` or one of its
/// descendants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescendantMatrix {
    n: usize,
    entries: Vec<bool>,
}

impl DescendantMatrix {
    pub fn new(h: &Hierarchy) -> Self {
        let n = h.len();
        let mut entries = vec![false; n * n];
        for j in 0..n {
            for i in h.ancestors_inclusive(j) {
                entries[i * n + j] = true;
            }
        }
        DescendantMatrix { n, entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn trace(&self) -> usize {
        (0..self.n).filter(|&i| self.get(i, i)).count()
    }
}

/// Uniformly random recursive tree: node `i > 0` attaches to a uniform
/// earlier node. Names are `n0`, `n1`, ... before pre-order renumbering.
pub fn random_tree<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Hierarchy {
    assert!(n >= 1);
    let names = (0..n).map(|i| format!("n{i}")).collect();
    let parents: Vec<Option<usize>> = (0..n)
        .map(|i| (i > 0).then(|| rng.random_range(0..i)))
        .collect();
    Hierarchy::from_parents(names, &parents).expect("valid random parent array")
}

/// Bundled CATAMI-style category trees.
pub mod catami {
    use super::Hierarchy;

    pub const SUBSTRATE: &str = include_str!("../data/substrate.txt");
    pub const RELIEF: &str = include_str!("../data/relief.txt");
    pub const BEDFORMS: &str = include_str!("../data/bedforms.txt");

    pub fn substrate() -> Hierarchy {
        Hierarchy::parse(SUBSTRATE).expect("bundled substrate tree parses")
    }

    pub fn relief() -> Hierarchy {
        Hierarchy::parse(RELIEF).expect("bundled relief tree parses")
    }

    pub fn bedforms() -> Hierarchy {
        Hierarchy::parse(BEDFORMS).expect("bundled bedforms tree parses")
    }

    /// Looks up a bundled tree by case-insensitive category name.
    pub fn builtin(name: &str) -> Option<Hierarchy> {
        match name.to_ascii_lowercase().as_str() {
            "substrate" => Some(substrate()),
            "relief" => Some(relief()),
            "bedforms" => Some(bedforms()),
            _ => None,
        }
    }
}
