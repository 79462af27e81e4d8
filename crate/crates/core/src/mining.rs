//! Training-triplet selection in input space.
//!
//! Hard mining takes every different-identity item in an anchor's top-k
//! neighborhood as a negative and pairs it with every positive of the anchor.
//! Semi-hard mining searches around each positive instead and keeps only
//! negatives farther from the anchor than that positive.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{build_forest, AnnForest, NeighborList, QueryConfig};
use crate::encoding::{encode_str, CharEmbeddingTable, NameEncoding};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, retrieval_metrics, AnchorResult, RetrievalMetrics};
use crate::pipeline::EntityRecord;

pub const DEFAULT_MAX_TRIPLETS_PER_ANCHOR: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogItem {
    pub item_id: u64,
    pub identity_id: u64,
    pub surface_form: String,
    pub input_vector: Vec<f32>,
}

/// Items with identities and input-space vectors.
#[derive(Debug, Clone)]
pub struct ItemCatalog {
    items: Vec<CatalogItem>,
    position: HashMap<u64, usize>,
    by_identity: BTreeMap<u64, Vec<u64>>,
}

/// Row-major flattening of an encoding, as `f32`.
pub fn input_vector(enc: &NameEncoding) -> Vec<f32> {
    enc.as_slice().iter().map(|v| *v as f32).collect()
}

impl ItemCatalog {
    pub fn new(mut items: Vec<CatalogItem>) -> Result<Self> {
        items.sort_by_key(|i| i.item_id);
        let mut position = HashMap::with_capacity(items.len());
        let mut by_identity: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for (pos, item) in items.iter().enumerate() {
            if position.insert(item.item_id, pos).is_some() {
                return Err(Error::DuplicateId(item.item_id));
            }
            by_identity.entry(item.identity_id).or_default().push(item.item_id);
        }
        Ok(ItemCatalog {
            items,
            position,
            by_identity,
        })
    }

    /// One item per surface form. Item ids count up from 0 in entity order, then name order.
    pub fn from_entities(entities: &[EntityRecord], table: &CharEmbeddingTable, max_tokens: usize) -> Result<Self> {
        let mut items = Vec::new();
        for ent in entities {
            for name in &ent.names {
                let enc = encode_str(name, table, max_tokens)?;
                items.push(CatalogItem {
                    item_id: items.len() as u64,
                    identity_id: ent.id,
                    surface_form: name.clone(),
                    input_vector: input_vector(&enc),
                });
            }
        }
        ItemCatalog::new(items)
    }

    /// Items sorted by id.
    pub fn items(&self) -> &[CatalogItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item_id: u64) -> Option<&CatalogItem> {
        self.position.get(&item_id).map(|&p| &self.items[p])
    }

    pub fn item(&self, item_id: u64) -> Result<&CatalogItem> {
        self.get(item_id).ok_or(Error::UnknownItem(item_id))
    }

    pub fn identity_of(&self, item_id: u64) -> Option<u64> {
        self.get(item_id).map(|i| i.identity_id)
    }

    /// Item ids of an identity, ascending.
    pub fn identity_items(&self, identity: u64) -> &[u64] {
        self.by_identity.get(&identity).map_or(&[], Vec::as_slice)
    }

    pub fn identities(&self) -> impl Iterator<Item = u64> + '_ {
        self.by_identity.keys().copied()
    }

    /// Keeps only items whose identity passes `keep`.
    pub fn filter_identities(&self, keep: impl Fn(u64) -> bool) -> Result<ItemCatalog> {
        ItemCatalog::new(self.items.iter().filter(|i| keep(i.identity_id)).cloned().collect())
    }

    pub fn build_forest(&self, n_trees: usize, leaf_size: usize, seed: u64) -> Result<AnnForest> {
        let vectors: Vec<(u64, Vec<f32>)> = self
            .items
            .iter()
            .map(|i| (i.item_id, i.input_vector.clone()))
            .collect();
        build_forest(&vectors, n_trees, leaf_size, seed)
    }

    fn distance(&self, a: &CatalogItem, b: &CatalogItem) -> f64 {
        a.input_vector
            .iter()
            .zip(&b.input_vector)
            .map(|(x, y)| {
                let d = f64::from(*x) - f64::from(*y);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiningStrategy {
    Hard,
    SemiHard,
}

impl std::str::FromStr for MiningStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(MiningStrategy::Hard),
            "semi-hard" | "semi_hard" => Ok(MiningStrategy::SemiHard),
            other => Err(Error::InvalidConfig(format!("unknown mining strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiningConfig {
    pub k: usize,
    pub strategy: MiningStrategy,
    pub max_triplets_per_anchor: usize,
    /// Leaf items inspected per query; `None` uses the index default.
    pub search_budget: Option<usize>,
}

impl MiningConfig {
    pub fn new(k: usize, strategy: MiningStrategy) -> Self {
        MiningConfig {
            k,
            strategy,
            max_triplets_per_anchor: DEFAULT_MAX_TRIPLETS_PER_ANCHOR,
            search_budget: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.max_triplets_per_anchor == 0 {
            return Err(Error::InvalidConfig("k and the per-anchor cap must be at least 1".into()));
        }
        Ok(())
    }

    fn query(&self, exclude: u64) -> QueryConfig {
        QueryConfig {
            k: self.k,
            search_budget: self.search_budget,
            exclude: Some(exclude),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TripletIdx {
    pub anchor: u64,
    pub positive: u64,
    pub negative: u64,
}

impl TripletIdx {
    pub fn new(anchor: u64, positive: u64, negative: u64) -> Self {
        TripletIdx {
            anchor,
            positive,
            negative,
        }
    }
}

fn check_inputs(catalog: &ItemCatalog, forest: &AnnForest) -> Result<()> {
    if catalog.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let dim = catalog.items[0].input_vector.len();
    if dim != forest.dim() {
        return Err(Error::DimensionMismatch {
            expected: forest.dim(),
            got: dim,
        });
    }
    Ok(())
}

/// Runs the configured strategy.
pub fn mine(catalog: &ItemCatalog, forest: &AnnForest, cfg: &MiningConfig) -> Result<Vec<TripletIdx>> {
    match cfg.strategy {
        MiningStrategy::Hard => mine_hard(catalog, forest, cfg),
        MiningStrategy::SemiHard => mine_semi_hard(catalog, forest, cfg),
    }
}

fn per_anchor<F>(catalog: &ItemCatalog, f: F) -> Result<Vec<TripletIdx>>
where
    F: Fn(&CatalogItem) -> Result<Vec<TripletIdx>> + Sync + Send,
{
    let chunks: Vec<Vec<TripletIdx>> = catalog.items.par_iter().map(f).collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn mine_hard(catalog: &ItemCatalog, forest: &AnnForest, cfg: &MiningConfig) -> Result<Vec<TripletIdx>> {
    check_inputs(catalog, forest)?;
    cfg.validate()?;
    per_anchor(catalog, |anchor| {
        let neighbors = forest.query(&anchor.input_vector, &cfg.query(anchor.item_id))?;
        let positives: Vec<u64> = catalog
            .identity_items(anchor.identity_id)
            .iter()
            .copied()
            .filter(|&p| p != anchor.item_id)
            .collect();
        let mut out = Vec::new();
        'outer: for n in &neighbors {
            if catalog.identity_of(n.id) == Some(anchor.identity_id) {
                continue;
            }
            for &p in &positives {
                if out.len() == cfg.max_triplets_per_anchor {
                    break 'outer;
                }
                out.push(TripletIdx::new(anchor.item_id, p, n.id));
            }
        }
        Ok(out)
    })
}

pub fn mine_semi_hard(catalog: &ItemCatalog, forest: &AnnForest, cfg: &MiningConfig) -> Result<Vec<TripletIdx>> {
    check_inputs(catalog, forest)?;
    cfg.validate()?;
    // a positive's neighborhood does not depend on the anchor, so query each item once
    let neighborhoods: Vec<NeighborList> = catalog
        .items
        .par_iter()
        .map(|item| forest.query(&item.input_vector, &cfg.query(item.item_id)))
        .collect::<Result<_>>()?;
    per_anchor(catalog, |anchor| {
        // (neighbor rank, positive id, negative id)
        let mut found: Vec<(usize, u64, u64)> = Vec::new();
        for &p in catalog.identity_items(anchor.identity_id) {
            if p == anchor.item_id {
                continue;
            }
            let positive = catalog.item(p)?;
            let d_pos = catalog.distance(anchor, positive);
            for (rank, n) in neighborhoods[catalog.position[&p]].iter().enumerate() {
                let negative = catalog.item(n.id)?;
                if negative.identity_id == anchor.identity_id {
                    continue;
                }
                if catalog.distance(anchor, negative) > d_pos {
                    found.push((rank, p, n.id));
                }
            }
        }
        found.sort_unstable();
        found.truncate(cfg.max_triplets_per_anchor);
        Ok(found
            .into_iter()
            .map(|(_, p, n)| TripletIdx::new(anchor.item_id, p, n))
            .collect())
    })
}

/// How positives and negatives sit around anchors before any training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceStats {
    pub k: usize,
    pub recall_at_k: f64,
    pub mean_pos_dist: f64,
    pub std_pos_dist: f64,
    pub mean_neg_dist: f64,
    pub std_neg_dist: f64,
}

/// Top-k neighborhood (self excluded) of every catalog item, and whether each
/// neighbor shares the anchor's identity. Items in catalog order.
fn neighborhood_results(catalog: &ItemCatalog, forest: &AnnForest, k: usize) -> Result<Vec<(NeighborList, AnchorResult)>> {
    check_inputs(catalog, forest)?;
    catalog
        .items
        .par_iter()
        .map(|anchor| {
            let list = forest.query(&anchor.input_vector, &QueryConfig::new(k).excluding(anchor.item_id))?;
            let hits = list
                .iter()
                .map(|n| catalog.identity_of(n.id) == Some(anchor.identity_id))
                .collect();
            let result = AnchorResult {
                positives: catalog.identity_items(anchor.identity_id).len() - 1,
                hits,
            };
            Ok((list, result))
        })
        .collect()
}

/// Retrieval metrics of the catalog's own vectors, each item querying the forest.
pub fn neighborhood_metrics(catalog: &ItemCatalog, forest: &AnnForest, k: usize) -> Result<RetrievalMetrics> {
    let results: Vec<AnchorResult> = neighborhood_results(catalog, forest, k)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    Ok(retrieval_metrics(&results, k))
}

pub fn baseline_stats(catalog: &ItemCatalog, forest: &AnnForest, k: usize) -> Result<SpaceStats> {
    let outcomes = neighborhood_results(catalog, forest, k)?;
    let mut neg_dists = Vec::new();
    let mut results = Vec::with_capacity(outcomes.len());
    for (list, result) in outcomes {
        neg_dists.extend(list.iter().zip(&result.hits).filter(|(_, h)| !**h).map(|(n, _)| n.distance));
        results.push(result);
    }
    let mut pos_dists = Vec::new();
    for anchor in &catalog.items {
        for &p in catalog.identity_items(anchor.identity_id) {
            if p != anchor.item_id {
                pos_dists.push(catalog.distance(anchor, catalog.item(p)?));
            }
        }
    }
    let metrics = retrieval_metrics(&results, k);
    let (mean_pos_dist, std_pos_dist) = mean_std(&pos_dists);
    let (mean_neg_dist, std_neg_dist) = mean_std(&neg_dists);
    Ok(SpaceStats {
        k,
        recall_at_k: metrics.recall,
        mean_pos_dist,
        std_pos_dist,
        mean_neg_dist,
        std_neg_dist,
    })
}

/// Writes `anchor<TAB>positive<TAB>negative` lines.
pub fn write_triplets<W: Write>(triplets: &[TripletIdx], mut sink: W) -> Result<()> {
    for t in triplets {
        writeln!(sink, "{}\t{}\t{}", t.anchor, t.positive, t.negative)?;
    }
    Ok(())
}

pub fn read_triplets<R: BufRead>(source: R) -> Result<Vec<TripletIdx>> {
    let mut out = Vec::new();
    for (lineno, line) in source.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::format(format!("line {}: bad item id {s:?}", lineno + 1)))
        };
        match fields.as_slice() {
            [a, p, n] => out.push(TripletIdx::new(parse(a)?, parse(p)?, parse(n)?)),
            _ => {
                return Err(Error::format(format!(
                    "line {}: expected 3 tab-separated fields, found {}",
                    lineno + 1,
                    fields.len()
                )))
            }
        }
    }
    Ok(out)
}
