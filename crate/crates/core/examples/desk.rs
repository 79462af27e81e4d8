//! Desk-scale run on synthetic people: mine, train, evaluate.
//!
//! ```text
//! cargo run --release --example desk -- [char_dim] [hard|semi-hard] [epochs] [seed]
//! ```

use std::collections::BTreeSet;
use std::time::Instant;

use fuzzyjoin::ann::DEFAULT_LEAF_SIZE;
use fuzzyjoin::encoder::{init_params, DEFAULT_LAYERS};
use fuzzyjoin::encoding::{latin1_charset, random_char_embeddings};
use fuzzyjoin::join::evaluate;
use fuzzyjoin::loss::{LossKind, LossParams};
use fuzzyjoin::mining::{baseline_stats, mine, ItemCatalog, MiningConfig, MiningStrategy};
use fuzzyjoin::model::ModelFile;
use fuzzyjoin::synth::{synthetic_people, SynthConfig};
use fuzzyjoin::trainer::{split_dataset, train_on, Encodings, TrainConfig};

const K: usize = 20;
const TREES: usize = 16;
const MAX_TOKENS: usize = 10;

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T
where
    T::Err: std::fmt::Debug,
{
    std::env::args().nth(i).map(|s| s.parse().expect("bad argument")).unwrap_or(default)
}

fn main() -> fuzzyjoin::Result<()> {
    let char_dim: usize = arg(1, 100);
    let strategy: MiningStrategy = arg(2, MiningStrategy::Hard);
    let epochs: usize = arg(3, 5);
    let seed: u64 = arg(4, 1);
    let start = Instant::now();

    let entities = synthetic_people(&SynthConfig::new(1000, 1));
    let table = random_char_embeddings(latin1_charset(), char_dim, seed)?;
    let catalog = ItemCatalog::from_entities(&entities, &table, MAX_TOKENS)?;
    let encodings = Encodings::from_catalog(&catalog, &table, MAX_TOKENS)?;
    let ids: Vec<u64> = entities.iter().map(|e| e.id).collect();
    let split = split_dataset(&ids, [0.6, 0.2, 0.2], seed)?;

    let part = |ids: &BTreeSet<u64>| -> fuzzyjoin::Result<_> {
        let c = catalog.filter_identities(|i| ids.contains(&i))?;
        let f = c.build_forest(TREES, DEFAULT_LEAF_SIZE, seed)?;
        Ok((c, f))
    };
    let cfg = MiningConfig::new(K, strategy);
    let (c, f) = part(&split.train)?;
    let train = mine(&c, &f, &cfg)?;
    let (c, f) = part(&split.validation)?;
    let validation = mine(&c, &f, &cfg)?;
    let (c, f) = part(&split.test)?;
    let baseline = baseline_stats(&c, &f, K)?;
    println!(
        "{} items, {} train / {} validation triplets, test baseline recall {:.3} [{:.0?}]",
        catalog.len(),
        train.len(),
        validation.len(),
        baseline.recall_at_k,
        start.elapsed()
    );

    let loss = LossParams::for_kind(LossKind::Adapted);
    let train_cfg = TrainConfig {
        seed,
        max_epochs: epochs,
        ..TrainConfig::new(loss)
    };
    let init = init_params(&DEFAULT_LAYERS, char_dim, seed)?;
    let (params, report) = train_on(&train, &validation, &encodings, &train_cfg, init, |e| {
        println!(
            "epoch {} loss {:.4} validation accuracy {:.4} [{:.0?}]",
            e.epoch,
            e.train_loss,
            e.validation_accuracy,
            start.elapsed()
        )
    })?;
    println!(
        "best epoch {} ({:.4}), stopped by {:?}",
        report.best_epoch, report.best_validation_accuracy, report.stop_reason
    );

    let model = ModelFile::new(table, params, loss, MAX_TOKENS)?;
    let test: Vec<_> = entities.iter().filter(|e| split.test.contains(&e.id)).cloned().collect();
    let eval = evaluate(&test, &model, K, TREES, seed)?;
    println!(
        "test recall {:.3}, P@1 {:.3}, precision {:.3} over {} anchors [{:.0?}]",
        eval.recall,
        eval.precision_at_1,
        eval.precision_all,
        eval.anchors_evaluated,
        start.elapsed()
    );
    Ok(())
}
