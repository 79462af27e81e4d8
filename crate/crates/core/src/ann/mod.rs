//! Random-projection forest for approximate k-nearest-neighbor search.
//!
//! Each tree splits a node by taking two distinct items at random and using
//! the perpendicular bisector of the segment between them. Items with
//! `normal . x + offset > 0` go right and the rest go left. Queries walk all
//! trees best-first, ordered by the smallest margin seen along the path,
//! until `search_budget` leaf items have been inspected. Candidates are then
//! ranked by exact Euclidean distance.
//!
//! Vectors are stored as `f32`; distances and margins are evaluated in `f64`.

mod persist;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub use persist::{load_index, parse_index, save_index, INDEX_MAGIC, INDEX_VERSION};

const SPLIT_ATTEMPTS: usize = 16;

pub const DEFAULT_LEAF_SIZE: usize = 16;
pub const DEFAULT_TREES: usize = 16;

/// One search result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub distance: f64,
}

/// Ascending by distance, ties broken by ascending id.
pub type NeighborList = Vec<Neighbor>;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Node {
    Split {
        normal: Vec<f32>,
        offset: f32,
        left: u32,
        right: u32,
    },
    Leaf(Vec<u32>),
}

/// Node arena; index 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tree {
    pub(crate) nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildInfo {
    pub leaf_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnForest {
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<f32>,
    trees: Vec<Tree>,
    build: Option<BuildInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryConfig {
    pub k: usize,
    /// `None` means `n_trees * k * 8`.
    pub search_budget: Option<usize>,
    pub exclude: Option<u64>,
}

impl QueryConfig {
    pub fn new(k: usize) -> Self {
        QueryConfig {
            k,
            search_budget: None,
            exclude: None,
        }
    }

    pub fn with_budget(mut self, budget: usize) -> Self {
        self.search_budget = Some(budget);
        self
    }

    /// Inspect every leaf; results equal [`brute_force_knn`].
    pub fn unlimited(mut self) -> Self {
        self.search_budget = Some(usize::MAX);
        self
    }

    pub fn excluding(mut self, id: u64) -> Self {
        self.exclude = Some(id);
        self
    }

    pub fn budget_for(&self, n_trees: usize) -> usize {
        self.search_budget
            .unwrap_or_else(|| n_trees.max(1).saturating_mul(self.k).saturating_mul(8))
    }

    fn validate(&self, n_trees: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.budget_for(n_trees) < self.k {
            return Err(Error::InvalidConfig("search budget must be at least k".into()));
        }
        Ok(())
    }
}

/// Four running sums, so the adds do not wait on one another.
fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            let d = f64::from(x[j]) - f64::from(y[j]);
            acc[j] += d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Signed side of `x` relative to a split plane. Only orders the search and
/// picks a side, so it sums in `f32` with eight lanes.
fn margin(normal: &[f32], offset: f32, x: &[f32]) -> f64 {
    let mut acc = [0.0f32; 8];
    let (cn, cx) = (normal.chunks_exact(8), x.chunks_exact(8));
    let tail: f32 = cn.remainder().iter().zip(cx.remainder()).map(|(n, v)| n * v).sum();
    for (n, v) in cn.zip(cx) {
        for j in 0..8 {
            acc[j] += n[j] * v[j];
        }
    }
    let lanes = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    f64::from(lanes + tail) + f64::from(offset)
}

fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id))
}

/// Keeps the `k` best in order.
fn top_k(list: &mut NeighborList, k: usize) {
    if k == 0 {
        list.clear();
        return;
    }
    if list.len() > k {
        list.select_nth_unstable_by(k - 1, neighbor_order);
        list.truncate(k);
    }
    list.sort_by(neighbor_order);
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(tree as u64)))
}

impl AnnForest {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Build parameters; `None` for forests loaded from a file.
    pub fn build_info(&self) -> Option<BuildInfo> {
        self.build
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn vector(&self, index: usize) -> &[f32] {
        &self.vectors[index * self.dim..(index + 1) * self.dim]
    }

    /// Item ids of every leaf of tree `t`, in arena order.
    pub fn leaves(&self, t: usize) -> Vec<Vec<u64>> {
        self.trees[t]
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf(items) => Some(items.iter().map(|&i| self.ids[i as usize]).collect()),
                Node::Split { .. } => None,
            })
            .collect()
    }

    pub(crate) fn from_parts(dim: usize, ids: Vec<u64>, vectors: Vec<f32>, trees: Vec<Tree>) -> Self {
        AnnForest {
            dim,
            ids,
            vectors,
            trees,
            build: None,
        }
    }

    pub(crate) fn trees(&self) -> &[Tree] {
        &self.trees
    }

    fn check_query(&self, q: &[f32]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Approximate top-k; exact when the budget covers every item.
    pub fn query(&self, q: &[f32], cfg: &QueryConfig) -> Result<NeighborList> {
        self.check_query(q)?;
        cfg.validate(self.n_trees())?;
        let budget = cfg.budget_for(self.n_trees());
        if budget >= self.len() {
            return Ok(self.rank(q, cfg.k, cfg.exclude, 0..self.len()));
        }

        let mut heap = BinaryHeap::new();
        for t in 0..self.trees.len() {
            heap.push(Frontier {
                priority: f64::INFINITY,
                tree: t as u32,
                node: 0,
            });
        }
        // the budget counts distinct items
        let mut seen = vec![0u64; self.len().div_ceil(64)];
        let mut candidates: Vec<u32> = Vec::new();
        while let Some(Frontier { priority, tree, node }) = heap.pop() {
            if candidates.len() >= budget {
                break;
            }
            match &self.trees[tree as usize].nodes[node as usize] {
                Node::Leaf(items) => {
                    for &i in items {
                        let (word, bit) = (i as usize / 64, 1u64 << (i % 64));
                        if seen[word] & bit == 0 {
                            seen[word] |= bit;
                            candidates.push(i);
                        }
                    }
                }
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    let m = margin(normal, *offset, q);
                    heap.push(Frontier {
                        priority: priority.min(m),
                        tree,
                        node: *right,
                    });
                    heap.push(Frontier {
                        priority: priority.min(-m),
                        tree,
                        node: *left,
                    });
                }
            }
        }
        Ok(self.rank(q, cfg.k, cfg.exclude, candidates.into_iter().map(|i| i as usize)))
    }

    /// Exact top-k over the indexed items.
    pub fn brute_force(&self, q: &[f32], k: usize, exclude: Option<u64>) -> Result<NeighborList> {
        self.check_query(q)?;
        Ok(self.rank(q, k, exclude, 0..self.len()))
    }

    fn rank(&self, q: &[f32], k: usize, exclude: Option<u64>, items: impl Iterator<Item = usize>) -> NeighborList {
        let mut out: NeighborList = items
            .filter(|&i| Some(self.ids[i]) != exclude)
            .map(|i| Neighbor {
                id: self.ids[i],
                distance: sq_dist(self.vector(i), q).sqrt(),
            })
            .collect();
        top_k(&mut out, k);
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Frontier {
    priority: f64,
    tree: u32,
    node: u32,
}

impl PartialEq for Frontier {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier {}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
    }
}

/// Builds `n_trees` trees. Tree `t` draws from a generator seeded by `(seed, t)`,
/// so the result does not depend on how trees are scheduled.
pub fn build_forest(vectors: &[(u64, Vec<f32>)], n_trees: usize, leaf_size: usize, seed: u64) -> Result<AnnForest> {
    let first = vectors.first().ok_or(Error::EmptyInput)?;
    if n_trees == 0 || leaf_size == 0 {
        return Err(Error::InvalidConfig("n_trees and leaf_size must be at least 1".into()));
    }
    let dim = first.1.len();
    if dim == 0 {
        return Err(Error::InvalidConfig("vectors must have at least one component".into()));
    }
    let mut ids = Vec::with_capacity(vectors.len());
    let mut flat = Vec::with_capacity(vectors.len() * dim);
    let mut seen = HashSet::with_capacity(vectors.len());
    for (id, v) in vectors {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig(format!("item {id} has a non-finite component")));
        }
        if !seen.insert(*id) {
            return Err(Error::DuplicateId(*id));
        }
        ids.push(*id);
        flat.extend_from_slice(v);
    }
    if u32::try_from(ids.len()).is_err() {
        return Err(Error::InvalidConfig("too many items".into()));
    }

    let trees = (0..n_trees)
        .into_par_iter()
        .map(|t| build_tree(&flat, dim, ids.len(), leaf_size, &mut tree_rng(seed, t)))
        .collect();

    Ok(AnnForest {
        dim,
        ids,
        vectors: flat,
        trees,
        build: Some(BuildInfo { leaf_size, seed }),
    })
}

fn build_tree(flat: &[f32], dim: usize, n: usize, leaf_size: usize, rng: &mut ChaCha8Rng) -> Tree {
    let row = |i: u32| &flat[i as usize * dim..(i as usize + 1) * dim];
    let mut nodes = vec![Node::Leaf(Vec::new())];
    let mut work = vec![(0usize, (0..n as u32).collect::<Vec<u32>>())];
    while let Some((slot, items)) = work.pop() {
        if items.len() <= leaf_size {
            nodes[slot] = Node::Leaf(items);
            continue;
        }
        match choose_split(&items, &row, rng) {
            Some((normal, offset, left, right)) => {
                let (l, r) = (nodes.len(), nodes.len() + 1);
                nodes.push(Node::Leaf(Vec::new()));
                nodes.push(Node::Leaf(Vec::new()));
                nodes[slot] = Node::Split {
                    normal,
                    offset,
                    left: l as u32,
                    right: r as u32,
                };
                work.push((r, right));
                work.push((l, left));
            }
            // every item has the same vector
            None => nodes[slot] = Node::Leaf(items),
        }
    }
    Tree { nodes }
}

type Split = (Vec<f32>, f32, Vec<u32>, Vec<u32>);

fn choose_split<'a>(items: &[u32], row: &impl Fn(u32) -> &'a [f32], rng: &mut ChaCha8Rng) -> Option<Split> {
    let n = items.len();
    for attempt in 0..SPLIT_ATTEMPTS {
        let a = items[rng.gen_range(0..n)];
        let b = if attempt + 1 < SPLIT_ATTEMPTS {
            let j = rng.gen_range(0..n - 1);
            let j = if items[j] == a { n - 1 } else { j };
            items[j]
        } else {
            // last resort: any item whose vector differs from `a`
            match items.iter().find(|&&i| row(i) != row(a)) {
                Some(&i) => i,
                None => return None,
            }
        };
        let (va, vb) = (row(a), row(b));
        if va == vb {
            continue;
        }
        // unit normal, so margins are true distances to the plane
        let diff: Vec<f64> = va.iter().zip(vb).map(|(x, y)| f64::from(*x) - f64::from(*y)).collect();
        let len = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        let normal: Vec<f32> = diff.iter().map(|d| (d / len) as f32).collect();
        if !len.is_finite() || normal.iter().all(|v| *v == 0.0) {
            continue;
        }
        let offset = -normal
            .iter()
            .zip(va.iter().zip(vb))
            .map(|(nv, (x, y))| f64::from(*nv) * (f64::from(*x) + f64::from(*y)) / 2.0)
            .sum::<f64>();
        let offset = offset as f32;
        let (right, left): (Vec<u32>, Vec<u32>) = items.iter().partition(|&&i| margin(&normal, offset, row(i)) > 0.0);
        if !left.is_empty() && !right.is_empty() {
            return Some((normal, offset, left, right));
        }
    }
    None
}

/// Exact k nearest neighbors by scanning every item.
pub fn brute_force_knn(vectors: &[(u64, Vec<f32>)], q: &[f32], k: usize, exclude: Option<u64>) -> Result<NeighborList> {
    let mut out = Vec::with_capacity(vectors.len());
    for (id, v) in vectors {
        if v.len() != q.len() {
            return Err(Error::DimensionMismatch {
                expected: q.len(),
                got: v.len(),
            });
        }
        if Some(*id) == exclude {
            continue;
        }
        out.push(Neighbor {
            id: *id,
            distance: sq_dist(v, q).sqrt(),
        });
    }
    top_k(&mut out, k);
    Ok(out)
}
