use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use fuzzyjoin::ann::{build_forest, save_index, DEFAULT_LEAF_SIZE, DEFAULT_TREES};
use fuzzyjoin::encoder::{init_params, DEFAULT_LAYERS};
use fuzzyjoin::encoding::{latin1_charset, load_char_embeddings, random_char_embeddings, CharEmbeddingTable};
use fuzzyjoin::encoding::{DEFAULT_CHAR_DIM, DEFAULT_MAX_TOKENS};
use fuzzyjoin::join::{embed_column, evaluate, join, write_matches};
use fuzzyjoin::loss::{LossKind, LossParams};
use fuzzyjoin::mining::{
    baseline_stats, mine, read_triplets, write_triplets, ItemCatalog, MiningConfig, MiningStrategy, TripletIdx,
    DEFAULT_MAX_TRIPLETS_PER_ANCHOR,
};
use fuzzyjoin::model::{load_model, save_model, ModelFile};
use fuzzyjoin::pipeline::{finalize_dataset, read_entities, read_raw_records, write_entities, EntityKind, EntityRecord};
use fuzzyjoin::synth::{synthetic_people, SynthConfig};
use fuzzyjoin::trainer::{
    grid_search_margin, split_dataset, split_triplets, train_on, triplets_within, DatasetSplit, Encodings, TrainConfig,
};

const RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

#[derive(Parser)]
#[command(name = "fuzzyjoin", version, about = "Learned name embeddings and fuzzy joins")]
struct Cli {
    /// Seed for every random choice (tables, splits, initialization, trees).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Trees in each index built.
    #[arg(long, global = true, default_value_t = DEFAULT_TREES)]
    trees: usize,
    /// Worker threads; 0 lets the runtime decide.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cleanse (and augment) raw JSON-lines records into an entities file.
    Prepare {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write a synthetic people entities file.
    Synth {
        #[arg(long, default_value_t = 1000)]
        identities: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Input-space neighborhood statistics.
    Stats {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Mine training triplets in input space.
    Mine {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long, value_enum, default_value_t = Strategy::Hard)]
        strategy: Strategy,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_TRIPLETS_PER_ANCHOR)]
        cap: usize,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder on mined triplets.
    Train(TrainArgs),
    /// Embed one value per line; writes JSON lines.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build and save an index over an embedded column.
    Index {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Match each right value to its nearest left values.
    Join {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recall and precision of a model over an entities file.
    Eval {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
        /// Restrict to one partition of the identity split.
        #[arg(long, value_enum, default_value_t = Subset::All)]
        subset: Subset,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct InputArgs {
    /// Character embedding file (`<char> v1 v2 ...` per line); random when absent.
    #[arg(long)]
    char_embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CHAR_DIM)]
    char_dim: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    max_tokens: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, value_enum, default_value_t = SplitLevel::Identity)]
    split_level: SplitLevel,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long)]
    entities: PathBuf,
    #[arg(long, value_enum, default_value_t = Loss::Adapted)]
    loss: Loss,
    #[arg(long)]
    margin: Option<f64>,
    /// Grid-search these margins (comma-separated) and keep the best.
    #[arg(long, value_delimiter = ',')]
    margins: Vec<f64>,
    #[arg(long)]
    intra_margin: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    angle_deg: Option<f64>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LAYERS.to_vec())]
    layers: Vec<usize>,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// JSON-lines training log; standard output when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Hard,
    SemiHard,
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    Triplet,
    Improved,
    Angular,
    Adapted,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitLevel {
    Identity,
    Triplet,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    All,
    Train,
    Validation,
    Test,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    open(path)?
        .lines()
        .map(|l| l.map(|s| s.trim_end_matches('\r').to_owned()).map_err(Into::into))
        .collect()
}

fn load_entities(path: &Path) -> Result<Vec<EntityRecord>> {
    read_entities(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn load_model_file(path: &Path) -> Result<ModelFile> {
    load_model(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn char_table(args: &InputArgs, seed: u64) -> Result<CharEmbeddingTable> {
    match &args.char_embeddings {
        Some(p) => load_char_embeddings(open(p)?).with_context(|| format!("reading {}", p.display())),
        None => Ok(random_char_embeddings(latin1_charset(), args.char_dim, seed)?),
    }
}

fn identity_split(entities: &[EntityRecord], seed: u64) -> Result<DatasetSplit> {
    let ids: Vec<u64> = entities.iter().map(|e| e.id).collect();
    Ok(split_dataset(&ids, RATIOS, seed)?)
}

fn loss_params(args: &TrainArgs) -> LossParams {
    let kind = match args.loss {
        Loss::Triplet => LossKind::Triplet,
        Loss::Improved => LossKind::Improved,
        Loss::Angular => LossKind::Angular,
        Loss::Adapted => LossKind::Adapted,
    };
    let mut p = LossParams::for_kind(kind);
    if let Some(m) = args.margin {
        p.margin = m;
    }
    if let Some(m) = args.intra_margin {
        p.intra_margin = m;
    }
    if let Some(l) = args.lambda {
        p.lambda = l;
    }
    if let Some(a) = args.angle_deg {
        p.angle = a.to_radians();
    }
    p
}

#[allow(clippy::too_many_arguments)]
fn cmd_mine(
    entities: &Path,
    strategy: Strategy,
    k: usize,
    cap: usize,
    input: &InputArgs,
    split: &SplitArgs,
    out: &Path,
    cli: &Cli,
) -> Result<()> {
    let entities = load_entities(entities)?;
    let table = char_table(input, cli.seed)?;
    let catalog = ItemCatalog::from_entities(&entities, &table, input.max_tokens)?;
    let cfg = MiningConfig {
        max_triplets_per_anchor: cap,
        ..MiningConfig::new(
            k,
            match strategy {
                Strategy::Hard => MiningStrategy::Hard,
                Strategy::SemiHard => MiningStrategy::SemiHard,
            },
        )
    };
    // identity-level: mine inside each partition so no triplet spans two of them
    let parts: Vec<ItemCatalog> = match split.split_level {
        SplitLevel::Identity => {
            let s = identity_split(&entities, split.split_seed)?;
            [s.train, s.validation, s.test]
                .iter()
                .map(|ids| catalog.filter_identities(|i| ids.contains(&i)))
                .collect::<fuzzyjoin::Result<_>>()?
        }
        SplitLevel::Triplet => vec![catalog],
    };
    let mut triplets: Vec<TripletIdx> = Vec::new();
    for part in parts.iter().filter(|p| !p.is_empty()) {
        let forest = part.build_forest(cli.trees, DEFAULT_LEAF_SIZE, cli.seed)?;
        triplets.extend(mine(part, &forest, &cfg)?);
    }
    info!("mined {} triplets from {} items", triplets.len(), parts.iter().map(|p| p.len()).sum::<usize>());
    let mut sink = create(out)?;
    write_triplets(&triplets, &mut sink)?;
    sink.flush()?;
    Ok(())
}

fn cmd_train(args: &TrainArgs, cli: &Cli) -> Result<()> {
    let entities = load_entities(&args.entities)?;
    let table = char_table(&args.input, cli.seed)?;
    let catalog = ItemCatalog::from_entities(&entities, &table, args.input.max_tokens)?;
    let encodings = Encodings::from_catalog(&catalog, &table, args.input.max_tokens)?;
    let triplets = read_triplets(open(&args.triplets)?).context("reading triplets")?;
    for t in &triplets {
        for id in [t.anchor, t.positive, t.negative] {
            catalog.item(id)?;
        }
    }
    let (train_set, val_set) = match args.split.split_level {
        SplitLevel::Identity => {
            let s = identity_split(&entities, args.split.split_seed)?;
            (
                triplets_within(&triplets, &catalog, &s.train),
                triplets_within(&triplets, &catalog, &s.validation),
            )
        }
        SplitLevel::Triplet => {
            let (tr, va, _) = split_triplets(&triplets, RATIOS, args.split.split_seed)?;
            (tr, va)
        }
    };
    info!("{} training and {} validation triplets", train_set.len(), val_set.len());

    let mut loss = loss_params(args);
    let base = TrainConfig {
        batch_size: args.batch_size,
        learning_rate: args.lr,
        max_epochs: args.epochs,
        patience: args.patience,
        seed: cli.seed,
        ..TrainConfig::new(loss)
    };
    let init = init_params(&args.layers, table.dim(), cli.seed)?;
    let mut log_sink = output(args.log.as_deref())?;

    if !args.margins.is_empty() {
        let (best, runs) = grid_search_margin(&args.margins, &train_set, &val_set, &encodings, &base, &init)?;
        for r in &runs {
            let line = serde_json::json!({
                "margin": r.margin,
                "best_validation_accuracy": r.report.best_validation_accuracy,
                "best_epoch": r.report.best_epoch,
            });
            writeln!(log_sink, "{line}")?;
        }
        info!("grid search picked margin {best}");
        loss.margin = best;
    }
    let cfg = TrainConfig { loss, ..base };
    let mut write_error = None;
    let (params, report) = train_on(&train_set, &val_set, &encodings, &cfg, init, |e| {
        if let Err(err) = serde_json::to_writer(&mut log_sink, e)
            .map_err(io::Error::from)
            .and_then(|_| log_sink.write_all(b"\n"))
        {
            write_error.get_or_insert(err);
        }
    })?;
    if let Some(err) = write_error {
        return Err(err).context("writing training log");
    }
    let summary = serde_json::json!({
        "initial_validation_accuracy": report.initial_validation_accuracy,
        "best_epoch": report.best_epoch,
        "best_validation_accuracy": report.best_validation_accuracy,
        "stop_reason": report.stop_reason,
    });
    writeln!(log_sink, "{summary}")?;
    log_sink.flush()?;

    let model = ModelFile::new(table, params, loss, args.input.max_tokens)?;
    let mut sink = create(&args.out)?;
    save_model(&model, &mut sink)?;
    sink.flush()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare {
            input,
            kind,
            out,
            report,
        } => {
            let kind: EntityKind = kind.parse()?;
            let records = read_raw_records(open(input)?).with_context(|| format!("reading {}", input.display()))?;
            let (entities, rep) = finalize_dataset(&records, kind);
            info!("{} records in, {} entities out", rep.records_in, rep.entities_out);
            let mut sink = create(out)?;
            write_entities(&entities, &mut sink)?;
            sink.flush()?;
            if let Some(path) = report {
                let mut r = create(path)?;
                serde_json::to_writer_pretty(&mut r, &rep)?;
                r.flush()?;
            }
        }
        Command::Synth { identities, noise, out } => {
            if !(0.0..=1.0).contains(noise) {
                bail!("--noise must lie in [0, 1]");
            }
            let cfg = SynthConfig {
                noise_rate: *noise,
                ..SynthConfig::new(*identities, cli.seed)
            };
            let mut sink = create(out)?;
            write_entities(&synthetic_people(&cfg), &mut sink)?;
            sink.flush()?;
        }
        Command::Stats { entities, k, input } => {
            let entities = load_entities(entities)?;
            let table = char_table(input, cli.seed)?;
            let catalog = ItemCatalog::from_entities(&entities, &table, input.max_tokens)?;
            let forest = catalog.build_forest(cli.trees, DEFAULT_LEAF_SIZE, cli.seed)?;
            let stats = baseline_stats(&catalog, &forest, *k)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Mine {
            entities,
            strategy,
            k,
            cap,
            input,
            split,
            out,
        } => cmd_mine(entities, *strategy, *k, *cap, input, split, out, cli)?,
        Command::Train(args) => cmd_train(args, cli)?,
        Command::Embed { model, input, out } => {
            let model = load_model_file(model)?;
            let values = read_lines(input)?;
            let mut sink = output(out.as_deref())?;
            for e in embed_column(&values, &model)? {
                let line = serde_json::json!({ "value": values[e.index], "vector": &e.vector[..] });
                writeln!(sink, "{line}")?;
            }
            sink.flush()?;
        }
        Command::Index { model, input, out } => {
            let model = load_model_file(model)?;
            let values = read_lines(input)?;
            let vectors: Vec<(u64, Vec<f32>)> = embed_column(&values, &model)?
                .into_iter()
                .map(|e| (e.index as u64, e.vector.iter().map(|x| *x as f32).collect()))
                .collect();
            let forest = build_forest(&vectors, cli.trees, DEFAULT_LEAF_SIZE, cli.seed)?;
            let mut sink = create(out)?;
            save_index(&forest, &mut sink)?;
            sink.flush()?;
        }
        Command::Join {
            left,
            right,
            model,
            k,
            out,
        } => {
            let model = load_model_file(model)?;
            let matches = join(&read_lines(left)?, &read_lines(right)?, &model, *k, cli.trees, cli.seed)?;
            let mut sink = output(out.as_deref())?;
            write_matches(&matches, &mut sink)?;
            sink.flush()?;
        }
        Command::Eval {
            entities,
            model,
            k,
            subset,
            split_seed,
            out,
        } => {
            let mut entities = load_entities(entities)?;
            let keep: Option<BTreeSet<u64>> = match subset {
                Subset::All => None,
                part => {
                    let s = identity_split(&entities, *split_seed)?;
                    Some(match part {
                        Subset::Train => s.train,
                        Subset::Validation => s.validation,
                        _ => s.test,
                    })
                }
            };
            if let Some(keep) = keep {
                entities.retain(|e| keep.contains(&e.id));
            }
            let model = load_model_file(model)?;
            let report = evaluate(&entities, &model, *k, cli.trees, cli.seed)?;
            let mut sink = output(out.as_deref())?;
            writeln!(sink, "{}", serde_json::to_string_pretty(&report)?)?;
            sink.flush()?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
