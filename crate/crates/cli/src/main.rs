mod data;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ckg_core::config::ReasonerConfig;
use ckg_core::evaluation::{carve_unseen_split, compute_stats, evaluate, EngineScorer, KnownFacts};
use ckg_core::kg_store::Ckg;
use ckg_core::knn::KnnIndex;
use ckg_core::predictor::Checkpoint;
use ckg_core::reasoner::{load_proof_file, save_proof_file, Engine, ProofRecord, Query};
use ckg_core::train::{heldout_queries, train_reasoner, EpochReport};
use ckg_core::{Error, Result};

use data::{require_node, Dataset, EmbeddingSource};

#[derive(Parser)]
#[command(name = "ckg", version, about = "Link prediction over commonsense knowledge graphs")]
struct Cli {
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset statistics for a train/test pair.
    Stats {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Train the relation predictor and write a checkpoint.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        setup: Setup,
    },
    /// Answer one query, given as "relation<TAB>head text".
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        query: String,
        /// Append the proof to each answer line.
        #[arg(long)]
        explain: bool,
        #[arg(long)]
        save_proofs: Option<PathBuf>,
        #[command(flatten)]
        setup: Setup,
    },
    /// Filtered ranking metrics on a test file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Extra known facts, used only for filtering.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Only test triples with an endpoint absent from training.
        #[arg(long)]
        unseen_only: bool,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[command(flatten)]
        setup: Setup,
    },
    /// Print the proofs stored in a proof file.
    Explain { proofs: PathBuf },
}

#[derive(Args)]
struct Setup {
    /// Embedding file covering every node.
    #[arg(
        long,
        conflicts_with = "hash_embeddings",
        required_unless_present = "hash_embeddings"
    )]
    embeddings: Option<PathBuf>,
    /// Use deterministic hash vectors of `embedding_dim` components instead of a file.
    #[arg(long)]
    hash_embeddings: bool,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Tsv,
}

enum Failure {
    Usage(String),
    Engine(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

impl Setup {
    /// Defaults, then the config file, then `ENGINE_*` variables, then `--set`.
    fn config(&self) -> Result<ReasonerConfig, Failure> {
        let mut cfg = ReasonerConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_env(|k| std::env::var(k).ok())?;
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
            cfg.set(k.trim(), v.trim()).map_err(|msg| Error::Config {
                line: 0,
                msg: format!("--set {o}: {msg}"),
            })?;
        }
        cfg.validate()?;
        eprint!("{}", cfg.render());
        Ok(cfg)
    }

    fn source(&self) -> EmbeddingSource {
        match &self.embeddings {
            Some(p) => EmbeddingSource::File(p.clone()),
            None => EmbeddingSource::Hash,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&Failure::Usage(first_line(&e.to_string()))),
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(&Failure::Usage(format!("--threads: {e}")));
        }
    }
    let mut out = String::new();
    let status = run(cli.command, &mut out);
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(out.as_bytes());
    let _ = stdout.flush();
    match status {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&f),
    }
}

fn first_line(s: &str) -> String {
    let line = s.lines().next().unwrap_or("");
    line.strip_prefix("error: ").unwrap_or(line).to_string()
}

fn fail(f: &Failure) -> ExitCode {
    let (msg, code) = match f {
        Failure::Usage(m) => (m.clone(), 1),
        Failure::Engine(e @ Error::Numerical(_)) => (e.to_string(), 3),
        Failure::Engine(e) => (e.to_string(), 2),
    };
    eprintln!("error: {}", msg.replace('\n', " "));
    ExitCode::from(code)
}

fn run(command: Command, out: &mut String) -> Result<(), Failure> {
    match command {
        Command::Stats { train, test } => {
            let train = Ckg::load_triples(&train, None)?;
            let test = Ckg::load_triples(&test, None)?;
            out.push_str(&compute_stats(&train, &test).render());
        }
        Command::Train {
            train,
            dev,
            out: ckpt,
            setup,
        } => {
            let cfg = setup.config()?;
            let extra: Vec<&Path> = dev.iter().map(PathBuf::as_path).collect();
            let mut ds = Dataset::load(&train, &extra)?;
            let table = ds.embed(&setup.source(), &cfg)?;
            let dev = match dev {
                Some(_) => heldout_queries(&ds.graph, &ds.forward(0))?,
                None => Vec::new(),
            };
            let outcome = train_reasoner(&ds.graph, &table, &dev, &cfg, |r| eprintln!("{}", epoch_line(r)))?;
            if let Some(l) = outcome.initial_dev_loss {
                let _ = writeln!(out, "initial_dev_loss\t{l:.6}");
            }
            for r in &outcome.epochs {
                let _ = writeln!(out, "{}", epoch_line(r));
            }
            outcome.checkpoint.save(&ckpt)?;
        }
        Command::Infer {
            checkpoint,
            graph,
            query,
            explain,
            save_proofs,
            setup,
        } => {
            let cfg = setup.config()?;
            let (rel_name, head_text) = query
                .split_once('\t')
                .ok_or_else(|| Failure::Usage("query must be \"relation<TAB>head text\"".into()))?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut ds = Dataset::load(&graph, &[])?;
            let relation = ds.graph.relations().lookup(rel_name).ok_or_else(|| {
                Error::Lookup(format!(
                    "unknown relation {rel_name:?}; valid relations: {}",
                    ds.graph.relations().display_names().join(", ")
                ))
            })?;
            let source = setup.source();
            if matches!(source, EmbeddingSource::Hash) {
                ds.extend_nodes([head_text])?;
            }
            let table = adapted(ds.embed(&source, &cfg)?, &ckpt)?;
            let head = require_node(&ds.graph, head_text)?;
            let index = KnnIndex::exact(&table);
            let engine = Engine::new(&ds.graph, &table, &index, &ckpt.predictor)?;
            let answers = engine.answer_query(Query { relation, head }, &cfg)?;
            let records: Vec<ProofRecord> = answers
                .iter()
                .map(|a| ProofRecord::from_answer(&ds.graph, ds.graph.nodes(), a))
                .collect();
            for (i, (a, rec)) in answers.iter().zip(&records).enumerate() {
                let _ = write!(out, "{}\t{:.6}\t{}", i + 1, a.score, ds.graph.nodes().text(a.tail));
                if explain {
                    let _ = write!(out, "\t{}", rec.explain_line());
                }
                out.push('\n');
            }
            if let Some(path) = save_proofs {
                save_proof_file(&records, path)?;
            }
        }
        Command::Eval {
            checkpoint,
            train,
            test,
            dev,
            unseen_only,
            format,
            setup,
        } => {
            let cfg = setup.config()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut extra = vec![test.as_path()];
            extra.extend(dev.as_deref());
            let mut ds = Dataset::load(&train, &extra)?;
            let table = adapted(ds.embed(&setup.source(), &cfg)?, &ckpt)?;
            let mut triples = ds.forward(0);
            if unseen_only {
                triples = carve_unseen_split(&ds.graph, &triples);
            }
            if triples.is_empty() {
                let _ = writeln!(out, "0 triples evaluated");
                return Ok(());
            }
            let known = KnownFacts::from_graphs(ds.graph.relations(), std::iter::once(&ds.graph).chain(&ds.extra))?;
            let index = KnnIndex::exact(&table);
            let engine = Engine::new(&ds.graph, &table, &index, &ckpt.predictor)?;
            let scorer = EngineScorer {
                engine: &engine,
                cfg: &cfg,
            };
            let report = evaluate(&scorer, &triples, &known, ds.graph.relations(), ds.graph.nodes().len())?;
            out.push_str(&match format {
                Format::Text => report.render_text(),
                Format::Tsv => report.render_tsv(),
            });
        }
        Command::Explain { proofs } => {
            let records = load_proof_file(&proofs)?;
            for (i, r) in records.iter().enumerate() {
                if i > 0 {
                    out.push('\n');
                }
                out.push_str(&r.explain());
            }
        }
    }
    Ok(())
}

fn epoch_line(r: &EpochReport) -> String {
    let dev = r.dev_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
    format!(
        "epoch {}\ttrain_loss {:.6}\tdev_loss {dev}\tlr {:.6e}",
        r.epoch, r.train_loss, r.lr
    )
}

fn adapted(
    table: ckg_core::embedding::EmbeddingTable,
    ckpt: &Checkpoint,
) -> Result<ckg_core::embedding::EmbeddingTable> {
    match &ckpt.adapter {
        Some(a) => table.transformed(&a.matrix),
        None => Ok(table),
    }
}
