//! Embedding columns, joining them through the index, and scoring a model.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ann::{build_forest, QueryConfig, DEFAULT_LEAF_SIZE};
use crate::encoder::EmbeddingVector;
use crate::error::{Error, Result};
use crate::mining::{neighborhood_metrics, CatalogItem, ItemCatalog};
use crate::model::ModelFile;
use crate::pipeline::EntityRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnEmbedding {
    /// Position of the value in the input column.
    pub index: usize,
    pub vector: EmbeddingVector,
}

/// Embeds each value in order. Values with no tokens are skipped with a warning.
pub fn embed_column(values: &[String], model: &ModelFile) -> Result<Vec<ColumnEmbedding>> {
    let out: Vec<Option<ColumnEmbedding>> = values
        .par_iter()
        .enumerate()
        .map(|(index, v)| match model.embed(v) {
            Ok(vector) => Ok(Some(ColumnEmbedding { index, vector })),
            Err(Error::EmptyName) => {
                log::warn!("skipping empty value at row {}", index + 1);
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinMatch {
    pub right_value: String,
    pub left_value: String,
    pub distance: f64,
    /// 1-based.
    pub rank: usize,
}

/// Indexes `left`, then reports the `k` nearest left values of every right value.
pub fn join(
    left: &[String],
    right: &[String],
    model: &ModelFile,
    k: usize,
    n_trees: usize,
    seed: u64,
) -> Result<Vec<JoinMatch>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let left_emb = embed_column(left, model)?;
    let right_emb = embed_column(right, model)?;
    if left_emb.is_empty() || right_emb.is_empty() {
        return Err(Error::EmptyColumn);
    }
    let vectors: Vec<(u64, Vec<f32>)> = left_emb.iter().map(|e| (e.index as u64, to_f32(&e.vector))).collect();
    let forest = build_forest(&vectors, n_trees, DEFAULT_LEAF_SIZE, seed)?;
    let k = k.min(vectors.len());
    let cfg = if k == vectors.len() {
        QueryConfig::new(k).unlimited()
    } else {
        QueryConfig::new(k)
    };
    let per_row: Vec<Vec<JoinMatch>> = right_emb
        .par_iter()
        .map(|r| {
            let neighbors = forest.query(&to_f32(&r.vector), &cfg)?;
            Ok(neighbors
                .iter()
                .enumerate()
                .map(|(i, n)| JoinMatch {
                    right_value: right[r.index].clone(),
                    left_value: left[n.id as usize].clone(),
                    distance: n.distance,
                    rank: i + 1,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_row.into_iter().flatten().collect())
}

/// `right_value<TAB>left_value<TAB>rank<TAB>distance` lines.
pub fn write_matches<W: Write>(matches: &[JoinMatch], mut sink: W) -> Result<()> {
    for m in matches {
        writeln!(sink, "{}\t{}\t{}\t{}", m.right_value, m.left_value, m.rank, m.distance)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub recall: f64,
    pub precision_at_1: f64,
    pub precision_all: f64,
    pub anchors_evaluated: usize,
}

/// Scores precomputed vectors: item ids run over entity order, then name order.
pub fn evaluate_vectors(
    entities: &[EntityRecord],
    vectors: Vec<Vec<f32>>,
    k: usize,
    n_trees: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut items = Vec::with_capacity(vectors.len());
    let mut vectors = vectors.into_iter();
    for e in entities {
        for name in &e.names {
            let input_vector = vectors
                .next()
                .ok_or_else(|| Error::InvalidConfig("fewer vectors than names".into()))?;
            items.push(CatalogItem {
                item_id: items.len() as u64,
                identity_id: e.id,
                surface_form: name.clone(),
                input_vector,
            });
        }
    }
    if vectors.next().is_some() {
        return Err(Error::InvalidConfig("more vectors than names".into()));
    }
    if items.is_empty() {
        return Err(Error::EmptyInput);
    }
    let catalog = ItemCatalog::new(items)?;
    let forest = catalog.build_forest(n_trees, DEFAULT_LEAF_SIZE, seed)?;
    let m = neighborhood_metrics(&catalog, &forest, k)?;
    Ok(EvalReport {
        k,
        recall: m.recall,
        precision_at_1: m.precision_at_1,
        precision_all: m.precision_all,
        anchors_evaluated: m.anchors_evaluated,
    })
}

/// Every form queries the index of all forms (itself excluded).
pub fn evaluate(entities: &[EntityRecord], model: &ModelFile, k: usize, n_trees: usize, seed: u64) -> Result<EvalReport> {
    let names: Vec<&String> = entities.iter().flat_map(|e| &e.names).collect();
    if names.is_empty() {
        return Err(Error::EmptyInput);
    }
    let vectors: Vec<Vec<f32>> = names
        .par_iter()
        .map(|n| model.embed(n).map(|v| to_f32(&v)))
        .collect::<Result<_>>()?;
    evaluate_vectors(entities, vectors, k, n_trees, seed)
}
