//! Adam training of the encoder on mined triplets with early stopping.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{embed, encoder_backward_into, encoder_forward, normalize, EncoderParams};
use crate::encoding::{encode_str, CharEmbeddingTable, NameEncoding};
use crate::error::{Error, Result};
use crate::loss::{loss_and_gradients, LossParams, TripletEmbeddings};
use crate::mining::{ItemCatalog, TripletIdx};

/// Triplets per parallel work unit. Fixed so the reduction order never depends on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: BTreeSet<u64>,
    pub validation: BTreeSet<u64>,
    pub test: BTreeSet<u64>,
}

/// Largest-remainder apportionment of `n` items; ties go to the earlier part.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * n as f64);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig("split ratios must be positive and sum to 1".into()));
    }
    Ok(())
}

/// Seeded shuffle, then contiguous train / validation / test partition.
pub fn split_dataset(identities: &[u64], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    check_ratios(ratios)?;
    let mut ids: Vec<u64> = identities.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 3 {
        return Err(Error::TooFewIdentities(ids.len()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [a, b, _] = apportion(ids.len(), ratios);
    Ok(DatasetSplit {
        train: ids[..a].iter().copied().collect(),
        validation: ids[a..a + b].iter().copied().collect(),
        test: ids[a + b..].iter().copied().collect(),
    })
}

/// The literal reading: shuffle triplets themselves and cut them 3 ways.
pub fn split_triplets(
    triplets: &[TripletIdx],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<TripletIdx>, Vec<TripletIdx>, Vec<TripletIdx>)> {
    check_ratios(ratios)?;
    let mut ts = triplets.to_vec();
    ts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let [a, b, _] = apportion(ts.len(), ratios);
    let test = ts.split_off(a + b);
    let val = ts.split_off(a);
    Ok((ts, val, test))
}

/// Triplets whose three items all belong to `identities`.
pub fn triplets_within(triplets: &[TripletIdx], catalog: &ItemCatalog, identities: &BTreeSet<u64>) -> Vec<TripletIdx> {
    let inside = |id| catalog.identity_of(id).is_some_and(|i| identities.contains(&i));
    triplets
        .iter()
        .copied()
        .filter(|t| inside(t.anchor) && inside(t.positive) && inside(t.negative))
        .collect()
}

/// Encoder inputs per item id.
#[derive(Debug, Clone, Default)]
pub struct Encodings(HashMap<u64, NameEncoding>);

impl Encodings {
    pub fn from_catalog(catalog: &ItemCatalog, table: &CharEmbeddingTable, max_tokens: usize) -> Result<Self> {
        let pairs: Vec<(u64, NameEncoding)> = catalog
            .items()
            .par_iter()
            .map(|i| Ok((i.item_id, encode_str(&i.surface_form, table, max_tokens)?)))
            .collect::<Result<_>>()?;
        Ok(Encodings(pairs.into_iter().collect()))
    }

    pub fn insert(&mut self, item_id: u64, enc: NameEncoding) {
        self.0.insert(item_id, enc);
    }

    pub fn get(&self, item_id: u64) -> Result<&NameEncoding> {
        self.0.get(&item_id).ok_or(Error::UnknownItem(item_id))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub loss: LossParams,
}

impl TrainConfig {
    pub fn new(loss: LossParams) -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 50,
            patience: 3,
            grad_clip_norm: 5.0,
            seed: 0,
            loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("bad Adam hyperparameters");
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-triplet loss over the epoch.
    pub train_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_validation_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch beat the initial parameters.
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    pub stop_reason: StopReason,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let g: Vec<f64> = grads.iter().copied().collect();
        let mut i = 0;
        params.for_each_mut(|p| {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            i += 1;
        });
    }
}

/// Embeds each distinct item once, with the loss's normalization policy.
fn embed_items(ids: &BTreeSet<u64>, encodings: &Encodings, params: &EncoderParams, loss: &LossParams) -> Result<HashMap<u64, Vec<f64>>> {
    let ids: Vec<u64> = ids.iter().copied().collect();
    let vecs: Vec<(u64, Vec<f64>)> = ids
        .par_iter()
        .map(|&id| {
            let e = embed(encodings.get(id)?, params)?;
            let v = if loss.normalize_inputs { normalize(&e)? } else { e };
            Ok((id, v.into_inner()))
        })
        .collect::<Result<_>>()?;
    Ok(vecs.into_iter().collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fraction of triplets with d(a, p) < d(a, n); ties count as wrong.
pub fn triplet_accuracy(
    triplets: &[TripletIdx],
    encodings: &Encodings,
    params: &EncoderParams,
    loss: &LossParams,
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let ids: BTreeSet<u64> = triplets.iter().flat_map(|t| [t.anchor, t.positive, t.negative]).collect();
    let emb = embed_items(&ids, encodings, params, loss)?;
    let correct = triplets
        .iter()
        .filter(|t| sq_dist(&emb[&t.anchor], &emb[&t.positive]) < sq_dist(&emb[&t.anchor], &emb[&t.negative]))
        .count();
    Ok(correct as f64 / triplets.len() as f64)
}

/// Summed loss and gradient of a run of triplets.
fn chunk_gradient(
    chunk: &[TripletIdx],
    encodings: &Encodings,
    params: &EncoderParams,
    loss: &LossParams,
) -> Result<(f64, EncoderParams)> {
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for t in chunk {
        let (ea, ta) = encoder_forward(encodings.get(t.anchor)?, params)?;
        let (ep, tp) = encoder_forward(encodings.get(t.positive)?, params)?;
        let (en, tn) = encoder_forward(encodings.get(t.negative)?, params)?;
        let (value, g) = loss_and_gradients(&TripletEmbeddings::new(&ea, &ep, &en), loss)?;
        total += value;
        encoder_backward_into(&ta, &g.anchor, params, &mut grads)?;
        encoder_backward_into(&tp, &g.positive, params, &mut grads)?;
        encoder_backward_into(&tn, &g.negative, params, &mut grads)?;
    }
    Ok((total, grads))
}

fn batch_gradient(
    batch: &[TripletIdx],
    encodings: &Encodings,
    params: &EncoderParams,
    loss: &LossParams,
) -> Result<(f64, EncoderParams)> {
    let parts: Vec<(f64, EncoderParams)> = batch
        .par_chunks(CHUNK)
        .map(|c| chunk_gradient(c, encodings, params, loss))
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut total, mut grads) = iter.next().ok_or(Error::EmptyBatch)?;
    for (v, g) in iter {
        total += v;
        grads.add_assign(&g);
    }
    Ok((total, grads))
}

/// Trains on `train_triplets`, early-stopping on `validation_triplets`.
/// Returns the parameters of the best validation epoch.
pub fn train_on(
    train_triplets: &[TripletIdx],
    validation_triplets: &[TripletIdx],
    encodings: &Encodings,
    cfg: &TrainConfig,
    init: EncoderParams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(EncoderParams, TrainReport)> {
    cfg.validate()?;
    if train_triplets.is_empty() || validation_triplets.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut params = init;
    let initial = triplet_accuracy(validation_triplets, encodings, &params, &cfg.loss)?;
    let mut best = (params.clone(), initial, 0usize);
    let mut report = TrainReport {
        initial_validation_accuracy: initial,
        epochs: Vec::new(),
        best_epoch: 0,
        best_validation_accuracy: initial,
        stop_reason: StopReason::MaxEpochs,
    };
    let mut adam = Adam::new(params.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = train_triplets.to_vec();
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (value, mut grads) = batch_gradient(batch, encodings, &params, &cfg.loss)?;
            let norm = grads.l2_norm();
            if !value.is_finite() || !norm.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            if norm > cfg.grad_clip_norm {
                grads.scale(cfg.grad_clip_norm / norm);
            }
            adam.step(&mut params, &grads, cfg);
            if !params.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += value;
        }
        let accuracy = triplet_accuracy(validation_triplets, encodings, &params, &cfg.loss)?;
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / order.len() as f64,
            validation_accuracy: accuracy,
        };
        on_epoch(&record);
        report.epochs.push(record);
        if accuracy > best.1 {
            best = (params.clone(), accuracy, epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                report.stop_reason = StopReason::Patience;
                break;
            }
        }
    }
    report.best_epoch = best.2;
    report.best_validation_accuracy = best.1;
    Ok((best.0, report))
}

/// Identity-level training: train triplets must lie inside `split.train`,
/// validation triplets inside `split.validation`; others are ignored.
pub fn train(
    triplets: &[TripletIdx],
    catalog: &ItemCatalog,
    encodings: &Encodings,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    init: EncoderParams,
) -> Result<(EncoderParams, TrainReport)> {
    let train_set = triplets_within(triplets, catalog, &split.train);
    let val_set = triplets_within(triplets, catalog, &split.validation);
    train_on(&train_set, &val_set, encodings, cfg, init, |_| {})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginResult {
    pub margin: f64,
    pub report: TrainReport,
}

/// One run per margin; best is the highest final (best-epoch) validation
/// accuracy, ties to the smaller margin.
pub fn grid_search_margin(
    margins: &[f64],
    train_triplets: &[TripletIdx],
    validation_triplets: &[TripletIdx],
    encodings: &Encodings,
    cfg: &TrainConfig,
    init: &EncoderParams,
) -> Result<(f64, Vec<MarginResult>)> {
    if margins.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut results = Vec::with_capacity(margins.len());
    for &margin in margins {
        let run_cfg = TrainConfig {
            loss: LossParams { margin, ..cfg.loss },
            ..*cfg
        };
        let (_, report) = train_on(train_triplets, validation_triplets, encodings, &run_cfg, init.clone(), |_| {})?;
        results.push(MarginResult { margin, report });
    }
    let best = results
        .iter()
        .max_by(|a, b| {
            a.report
                .best_validation_accuracy
                .total_cmp(&b.report.best_validation_accuracy)
                .then(b.margin.total_cmp(&a.margin))
        })
        .map(|r| r.margin)
        .expect("non-empty");
    Ok((best, results))
}
