//! `crn` — the context rewriting pipeline, stage by stage.
//!
//! Every stage reads and writes plain files (JSONL, text dumps, binary
//! checkpoints) so each step can be rerun and inspected in isolation. All
//! randomness flows from `--seed`; rerunning a stage with identical inputs
//! and seed produces byte-identical outputs.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crn_core::corpus::{
    self, detokenize, load_quadruplets, load_sessions, tokenize, DialogueSession, LoadOptions,
    PseudoQuadruplet, TokenizeMode,
};
use crn_core::crn::{CrnConfig, CrnModel};
use crn_core::eval::{bleu, distinct_n, embed_metrics, BleuSmoothing, EmbeddingTable};
use crn_core::lm::NgramLm;
use crn_core::pipeline::{
    baseline_select, end_to_end_select, InvertedIndex, IndexedPair,
};
use crn_core::pseudo::{generate_corpus, PseudoOptions, RerankTask};
use crn_core::singleturn::{
    pairs_from_sessions, train_ir, train_s2s, triples_from_sessions, FitConfig, IrConfig,
    IrModel, S2sConfig, S2sModel,
};
use crn_core::stats::{CooccurrenceTable, StatsConfig};
use crn_core::train::{
    finetune, pretrain, rl_examples_from_quads, GenerationReward, SelectionReward, TrainConfig,
};

#[derive(Parser)]
#[command(name = "crn", about = "Context rewriting pipeline for multi-turn dialogue", version)]
struct Cli {
    /// Seed for every random choice in the invoked stage.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Worker threads for parallel stages (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Info)]
    log_level: LogLevel,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, PartialOrd, ValueEnum)]
enum LogLevel {
    Quiet,
    Info,
    Debug,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Whitespace,
    Char,
}

impl From<ModeArg> for TokenizeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Whitespace => TokenizeMode::Whitespace,
            ModeArg::Char => TokenizeMode::Char,
        }
    }
}

#[derive(Args, Clone)]
struct CorpusArgs {
    /// Tokenization applied to every text field.
    #[arg(long, value_enum, default_value_t = ModeArg::Whitespace)]
    mode: ModeArg,
    /// Records with an utterance longer than this are skipped with a warning.
    #[arg(long, default_value_t = 30)]
    max_len: usize,
    /// Keep only the last (max_turns − 1) context utterances.
    #[arg(long, default_value_t = 2)]
    max_turns: usize,
}

impl CorpusArgs {
    fn load_options(&self) -> LoadOptions {
        LoadOptions {
            mode: self.mode.into(),
            max_len: self.max_len,
            max_turns: Some(self.max_turns),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Co-occurrence statistics for PMI keyword extraction.
    Stats {
        #[command(subcommand)]
        command: StatsCommand,
    },
    /// Insertion-scoring n-gram language model.
    Lm {
        #[command(subcommand)]
        command: LmCommand,
    },
    /// Pseudo rewritten-utterance synthesis.
    Pseudo {
        #[command(subcommand)]
        command: PseudoCommand,
    },
    /// Rewrite sessions with a trained model (beam search).
    Rewrite(RewriteArgs),
    /// Single-turn generator / selector training.
    Singleturn {
        #[command(subcommand)]
        command: SingleturnCommand,
    },
    /// Rewriter training: MLE pretraining and RL fine-tuning.
    Train {
        #[command(subcommand)]
        command: TrainCommand,
    },
    /// Automatic metrics.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Retrieval index and end-to-end response selection.
    Pipeline {
        #[command(subcommand)]
        command: PipelineCommand,
    },
}

#[derive(Subcommand)]
enum StatsCommand {
    /// Count session-level co-occurrences from a sessions JSONL file.
    Build {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        min_count: u64,
        #[arg(long, default_value_t = 1e-9)]
        epsilon: f64,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
}

#[derive(Subcommand)]
enum LmCommand {
    /// Train an add-k n-gram model on a text file (one sentence per line)
    /// or, with --from-sessions, on every utterance of a sessions file.
    Train {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, default_value_t = 0.1)]
        add_k: f64,
        #[arg(long, default_value_t = false)]
        from_sessions: bool,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Gen,
    Sel,
}

#[derive(Subcommand)]
enum PseudoCommand {
    /// Synthesize pseudo rewritten utterances for a sessions file.
    Gen {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        /// Reranker checkpoint: an s2s model for --task gen, a selector for
        /// --task sel.
        #[arg(long)]
        reranker: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        ratio: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        /// Negative responses per example for selection reranking.
        #[arg(long, default_value_t = 1)]
        negatives: usize,
        /// Optional stop-word list (one word per line) excluded from
        /// keyword selection.
        #[arg(long)]
        stop_list: Option<PathBuf>,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
}

#[derive(Args)]
struct RewriteArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Maximum rewrite length in tokens.
    #[arg(long, default_value_t = 40)]
    max_decode_len: usize,
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Args, Clone)]
struct FitArgs {
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.0004)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long, default_value_t = 20000)]
    vocab_max: usize,
    #[arg(long, default_value_t = 1)]
    vocab_min_count: u64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
}

impl FitArgs {
    fn fit_config(&self, seed: u64) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch,
            seed,
            clip_norm: self.clip,
            vocab_max: self.vocab_max,
            vocab_min_count: self.vocab_min_count,
            val_fraction: self.val_frac,
        }
    }
}

#[derive(Subcommand)]
enum SingleturnCommand {
    /// Train the generator on (last utterance, response) pairs.
    TrainGen {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        emb: usize,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[arg(long, default_value_t = 128)]
        dec_hidden: usize,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Train the selector on (utterance, response, sampled negative) triples.
    TrainSel {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        emb: usize,
        #[arg(long, default_value_t = 64)]
        hidden: usize,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
}

#[derive(Subcommand)]
enum TrainCommand {
    /// MLE pretraining on pseudo quadruplets.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        emb: usize,
        #[arg(long, default_value_t = 64)]
        enc_hidden: usize,
        #[arg(long, default_value_t = 128)]
        dec_hidden: usize,
        #[arg(long, default_value_t = 0.3)]
        dropout: f64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.0004)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 5.0)]
        clip: f64,
        #[arg(long, default_value_t = 0.1)]
        val_frac: f64,
        #[arg(long, default_value_t = 20000)]
        vocab_max: usize,
        #[arg(long, default_value_t = 1)]
        vocab_min_count: u64,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Policy-gradient fine-tuning with a task reward.
    Finetune {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        reward_ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 0.0001)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 5.0)]
        clip: f64,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 1)]
        samples: usize,
        /// Maximum sampled rewrite length in tokens.
        #[arg(long, default_value_t = 40)]
        max_decode_len: usize,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SmoothingArg {
    None,
    Add1,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Corpus-level BLEU between hypothesis and reference files.
    Bleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 4)]
        max_n: usize,
        #[arg(long, value_enum, default_value_t = SmoothingArg::None)]
        smoothing: SmoothingArg,
    },
    /// Distinct-n diversity of a hypothesis file.
    Distinct {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value_t = 2)]
        n: usize,
    },
    /// Embedding Average / Extrema / Greedy against a vector file.
    Embed {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        vec: PathBuf,
    },
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Build the utterance–response retrieval index from a pairs JSONL file
    /// ({"utterance": ..., "response": ...} per line).
    Index {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Whitespace)]
        mode: ModeArg,
    },
    /// Rewrite, retrieve, and rank: the full selection path with traces.
    Select {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        crn: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        /// Maximum rewrite length in tokens.
        #[arg(long, default_value_t = 40)]
        max_decode_len: usize,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// The keyword-append baseline over the same retrieve-then-rank path.
    BaselineSelect {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        keywords: usize,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
}

struct Logger {
    level: LogLevel,
}

impl Logger {
    fn info(&self, msg: impl AsRef<str>) {
        if self.level >= LogLevel::Info {
            eprintln!("[crn] {}", msg.as_ref());
        }
    }

    fn debug(&self, msg: impl AsRef<str>) {
        if self.level >= LogLevel::Debug {
            eprintln!("[crn:debug] {}", msg.as_ref());
        }
    }

    fn warnings(&self, warnings: &[String]) {
        for w in warnings {
            if self.level >= LogLevel::Info {
                eprintln!("[crn:warn] {w}");
            }
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .ok();
    }
    let log = Logger {
        level: cli.log_level,
    };
    match cli.command {
        Command::Stats { command } => run_stats(command, &log),
        Command::Lm { command } => run_lm(command, &log),
        Command::Pseudo { command } => run_pseudo(command, cli.seed, &log),
        Command::Rewrite(args) => run_rewrite(args, &log),
        Command::Singleturn { command } => run_singleturn(command, cli.seed, &log),
        Command::Train { command } => run_train(command, cli.seed, &log),
        Command::Eval { command } => run_eval(command),
        Command::Pipeline { command } => run_pipeline(command, &log),
    }
}

fn load_corpus(path: &Path, args: &CorpusArgs, log: &Logger) -> Result<Vec<DialogueSession>> {
    let report = load_sessions(path, &args.load_options())
        .with_context(|| format!("loading sessions from {}", path.display()))?;
    log.warnings(&report.warnings);
    log.debug(format!("{} sessions loaded", report.items.len()));
    Ok(report.items)
}

fn load_quads(path: &Path, args: &CorpusArgs, log: &Logger) -> Result<Vec<PseudoQuadruplet>> {
    let report = load_quadruplets(path, &args.load_options())
        .with_context(|| format!("loading quadruplets from {}", path.display()))?;
    log.warnings(&report.warnings);
    Ok(report.items)
}

fn run_stats(command: StatsCommand, log: &Logger) -> Result<()> {
    let StatsCommand::Build {
        input,
        out,
        min_count,
        epsilon,
        corpus,
    } = command;
    let sessions = load_corpus(&input, &corpus, log)?;
    let config = StatsConfig { min_count, epsilon };
    // Shard-merge keeps large corpora parallel; counts are a commutative
    // monoid so the result is independent of shard order.
    let shard = 4096.max(sessions.len() / 64);
    let table = {
        use rayon::prelude::*;
        let mut shards: Vec<CooccurrenceTable> = sessions
            .par_chunks(shard)
            .map(|chunk| CooccurrenceTable::build(chunk, &config))
            .collect::<Result<_, _>>()?;
        let mut table = shards.drain(..1).next().expect("non-empty corpus");
        for s in shards {
            table.absorb(s);
        }
        table
    };
    table.save(&out)?;
    log.info(format!(
        "stats: {} sessions → {}",
        table.n_sessions(),
        out.display()
    ));
    Ok(())
}

fn run_lm(command: LmCommand, log: &Logger) -> Result<()> {
    let LmCommand::Train {
        input,
        out,
        order,
        add_k,
        from_sessions,
        corpus,
    } = command;
    let sentences: Vec<Vec<String>> = if from_sessions {
        let sessions = load_corpus(&input, &corpus, log)?;
        sessions
            .iter()
            .flat_map(|s| {
                let mut v = s.context.clone();
                v.push(s.last.clone());
                v.push(s.response.clone());
                v
            })
            .collect()
    } else {
        let file = File::open(&input)
            .with_context(|| format!("opening sentence file {}", input.display()))?;
        BufReader::new(file)
            .lines()
            .collect::<std::io::Result<Vec<String>>>()?
            .into_iter()
            .filter(|l| !l.trim().is_empty())
            .map(|l| tokenize(&l, corpus.mode.into()))
            .collect()
    };
    let lm = NgramLm::train(&sentences, order, add_k)?;
    lm.save(&out)?;
    log.info(format!(
        "lm: order {order}, {} sentences, vocab {} → {}",
        sentences.len(),
        lm.vocab_len(),
        out.display()
    ));
    Ok(())
}

fn run_pseudo(command: PseudoCommand, seed: u64, log: &Logger) -> Result<()> {
    let PseudoCommand::Gen {
        task,
        stats,
        lm,
        reranker,
        input,
        out,
        ratio,
        delta,
        negatives,
        stop_list,
        corpus,
    } = command;
    let sessions = load_corpus(&input, &corpus, log)?;
    let table = CooccurrenceTable::load(&stats)?;
    let lm = NgramLm::load(&lm)?;
    let stop_words = match stop_list {
        Some(path) => {
            let file = File::open(&path)
                .with_context(|| format!("opening stop list {}", path.display()))?;
            BufReader::new(file)
                .lines()
                .collect::<std::io::Result<Vec<String>>>()?
                .into_iter()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect()
        }
        None => Default::default(),
    };
    let opts = PseudoOptions {
        ratio,
        delta,
        stop_words,
    };
    let run = match task {
        TaskArg::Gen => {
            let model = S2sModel::load(&reranker)?;
            generate_corpus(
                &sessions,
                &table,
                &lm,
                &RerankTask::Generation(&model),
                &opts,
                seed,
            )?
        }
        TaskArg::Sel => {
            let model = IrModel::load(&reranker)?;
            generate_corpus(
                &sessions,
                &table,
                &lm,
                &RerankTask::Selection {
                    model: &model,
                    negatives_per_example: negatives,
                },
                &opts,
                seed,
            )?
        }
    };
    let quads: Vec<PseudoQuadruplet> = run.outcomes.iter().map(|o| o.quad.clone()).collect();
    corpus::write_quadruplets(&out, &quads, corpus.mode.into())?;
    let stats_path = sidecar_path(&out, "stats.json");
    let mut w = BufWriter::new(File::create(&stats_path)?);
    writeln!(w, "{}", serde_json::to_string_pretty(&run.stats)?)?;
    w.flush()?;
    log.info(format!(
        "pseudo: {} rewritten / {} unrewritten → {} (+ {})",
        run.stats.rewritten,
        run.stats.unrewritten,
        out.display(),
        stats_path.display()
    ));
    Ok(())
}

#[derive(Serialize)]
struct RewriteRecord {
    context: Vec<String>,
    last: String,
    response: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    rewritten: Option<String>,
    rewritten_model: String,
}

fn run_rewrite(args: RewriteArgs, log: &Logger) -> Result<()> {
    let (model, _) = CrnModel::load(&args.ckpt)?;
    let mode: TokenizeMode = args.corpus.mode.into();
    let sessions = load_corpus(&args.input, &args.corpus, log)?;
    let mut w = BufWriter::new(File::create(&args.out)?);
    for session in &sessions {
        let hyps = model.beam_search(&session.last, &session.context, args.beam, args.max_decode_len)?;
        // An empty rewrite keeps the original utterance.
        let best = hyps
            .first()
            .map(|h| h.tokens.clone())
            .filter(|t| !t.is_empty())
            .unwrap_or_else(|| session.last.clone());
        let record = RewriteRecord {
            context: session.context.iter().map(|u| detokenize(u, mode)).collect(),
            last: detokenize(&session.last, mode),
            response: detokenize(&session.response, mode),
            rewritten: None,
            rewritten_model: detokenize(&best, mode),
        };
        writeln!(w, "{}", serde_json::to_string(&record)?)?;
    }
    w.flush()?;
    log.info(format!(
        "rewrite: {} sessions → {}",
        sessions.len(),
        args.out.display()
    ));
    Ok(())
}

fn run_singleturn(command: SingleturnCommand, seed: u64, log: &Logger) -> Result<()> {
    match command {
        SingleturnCommand::TrainGen {
            input,
            out,
            emb,
            hidden,
            dec_hidden,
            fit,
            corpus,
        } => {
            let sessions = load_corpus(&input, &corpus, log)?;
            let pairs = pairs_from_sessions(&sessions);
            let config = S2sConfig {
                emb_dim: emb,
                enc_hidden: hidden,
                dec_hidden,
            };
            let (model, stats) = train_s2s(&pairs, config, &fit.fit_config(seed))?;
            model.save(&out)?;
            write_jsonl(&sidecar_path(&out, "log.jsonl"), &stats)?;
            log.info(format!(
                "singleturn train-gen: {} pairs, final train loss {:.4} → {}",
                pairs.len(),
                stats.last().map(|s| s.train_loss).unwrap_or(f64::NAN),
                out.display()
            ));
        }
        SingleturnCommand::TrainSel {
            input,
            out,
            emb,
            hidden,
            fit,
            corpus,
        } => {
            let sessions = load_corpus(&input, &corpus, log)?;
            let triples = triples_from_sessions(&sessions, seed);
            let config = IrConfig {
                emb_dim: emb,
                hidden,
            };
            let (model, stats) = train_ir(&triples, config, &fit.fit_config(seed))?;
            model.save(&out)?;
            write_jsonl(&sidecar_path(&out, "log.jsonl"), &stats)?;
            log.info(format!(
                "singleturn train-sel: {} triples → {}",
                triples.len(),
                out.display()
            ));
        }
    }
    Ok(())
}

fn run_train(command: TrainCommand, seed: u64, log: &Logger) -> Result<()> {
    match command {
        TrainCommand::Pretrain {
            data,
            out,
            emb,
            enc_hidden,
            dec_hidden,
            dropout,
            epochs,
            lr,
            batch,
            clip,
            val_frac,
            vocab_max,
            vocab_min_count,
            corpus,
        } => {
            let quads = load_quads(&data, &corpus, log)?;
            if quads.is_empty() {
                bail!("no quadruplets in {}", data.display());
            }
            let sessions: Vec<DialogueSession> =
                quads.iter().map(|q| q.session.clone()).collect();
            let vocab = corpus::build_vocab(&sessions, vocab_max, vocab_min_count)?;
            let config = CrnConfig {
                emb_dim: emb,
                enc_hidden,
                dec_hidden,
                predict_hidden: dec_hidden,
                copy_hidden: enc_hidden,
                gate_hidden: enc_hidden / 2,
                dropout,
            };
            let mut model = CrnModel::new(vocab, config, seed);
            let train_config = TrainConfig {
                lr,
                batch_size: batch,
                epochs,
                seed,
                clip_norm: clip,
                val_fraction: val_frac,
                ..Default::default()
            };
            let report = pretrain(&mut model, &quads, &train_config)?;
            model.save(&out, None)?;
            write_jsonl(&sidecar_path(&out, "log.jsonl"), &report.logs)?;
            log.info(format!(
                "pretrain: best val loss {:.4} → {}",
                report.best_val_loss,
                out.display()
            ));
        }
        TrainCommand::Finetune {
            task,
            reward_ckpt,
            data,
            input,
            out,
            lambda,
            epochs,
            lr,
            batch,
            clip,
            temperature,
            samples,
            max_decode_len,
            corpus,
        } => {
            let quads = load_quads(&data, &corpus, log)?;
            let (mut model, _) = CrnModel::load(&input)?;
            let config = TrainConfig {
                lr,
                batch_size: batch,
                epochs,
                seed,
                clip_norm: clip,
                lambda,
                samples_per_example: samples,
                temperature,
                max_decode_len,
                ..Default::default()
            };
            let report = match task {
                TaskArg::Gen => {
                    let reward_model = S2sModel::load(&reward_ckpt)?;
                    let examples = rl_examples_from_quads(&quads, false, seed);
                    finetune(&mut model, &examples, &GenerationReward(&reward_model), &config)?
                }
                TaskArg::Sel => {
                    let reward_model = IrModel::load(&reward_ckpt)?;
                    let examples = rl_examples_from_quads(&quads, true, seed);
                    finetune(&mut model, &examples, &SelectionReward(&reward_model), &config)?
                }
            };
            model.save(&out, None)?;
            write_jsonl(&sidecar_path(&out, "log.jsonl"), &report.logs)?;
            log.info(format!(
                "finetune: reward curve {:?} → {}",
                report
                    .reward_curve
                    .iter()
                    .map(|r| (r * 1e4).round() / 1e4)
                    .collect::<Vec<f64>>(),
                out.display()
            ));
        }
    }
    Ok(())
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let file =
        File::open(path).with_context(|| format!("opening text file {}", path.display()))?;
    Ok(BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<String>>>()?
        .into_iter()
        .map(|l| tokenize(&l, TokenizeMode::Whitespace))
        .collect())
}

fn run_eval(command: EvalCommand) -> Result<()> {
    match command {
        EvalCommand::Bleu {
            hyp,
            reference,
            max_n,
            smoothing,
        } => {
            let hyps = read_token_lines(&hyp)?;
            let refs = read_token_lines(&reference)?;
            let smoothing = match smoothing {
                SmoothingArg::None => BleuSmoothing::None,
                SmoothingArg::Add1 => BleuSmoothing::Add1,
            };
            let score = bleu(&hyps, &refs, max_n, smoothing)?;
            println!("bleu-{max_n} {score:.6}");
        }
        EvalCommand::Distinct { hyp, n } => {
            let hyps = read_token_lines(&hyp)?;
            println!("distinct-{n} {:.6}", distinct_n(&hyps, n));
        }
        EvalCommand::Embed {
            hyp,
            reference,
            vec,
        } => {
            let hyps = read_token_lines(&hyp)?;
            let refs = read_token_lines(&reference)?;
            if hyps.len() != refs.len() {
                bail!(
                    "hypothesis and reference line counts differ: {} vs {}",
                    hyps.len(),
                    refs.len()
                );
            }
            let table = EmbeddingTable::load_text(&vec)?;
            let mut sums = (0.0, 0.0, 0.0);
            for (i, (h, r)) in hyps.iter().zip(&refs).enumerate() {
                let m = embed_metrics(h, r, &table)
                    .with_context(|| format!("line {}", i + 1))?;
                sums.0 += m.average;
                sums.1 += m.extrema;
                sums.2 += m.greedy;
            }
            let n = hyps.len() as f64;
            println!("average {:.6}", sums.0 / n);
            println!("extrema {:.6}", sums.1 / n);
            println!("greedy {:.6}", sums.2 / n);
        }
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct PairRecord {
    utterance: String,
    response: String,
}

#[derive(Serialize)]
struct ResponseRecord {
    query: String,
    response: String,
    used_fallback: bool,
}

fn run_pipeline(command: PipelineCommand, log: &Logger) -> Result<()> {
    match command {
        PipelineCommand::Index { pairs, out, mode } => {
            let mode: TokenizeMode = mode.into();
            let file = File::open(&pairs)
                .with_context(|| format!("opening pairs file {}", pairs.display()))?;
            let mut docs = Vec::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: PairRecord = serde_json::from_str(&line)
                    .with_context(|| format!("line {}", i + 1))?;
                docs.push(IndexedPair {
                    utterance: tokenize(&record.utterance, mode),
                    response: tokenize(&record.response, mode),
                });
            }
            let index = InvertedIndex::build(&docs)?;
            index.save(&out)?;
            log.info(format!(
                "index: {} docs → {}",
                index.len(),
                out.display()
            ));
        }
        PipelineCommand::Select {
            index,
            crn,
            ir,
            input,
            out,
            trace,
            k,
            beam,
            max_decode_len,
            corpus,
        } => {
            let idx = InvertedIndex::load(&index)?;
            let (model, _) = CrnModel::load(&crn)?;
            let selector = IrModel::load(&ir)?;
            let mode: TokenizeMode = corpus.mode.into();
            let sessions = load_corpus(&input, &corpus, log)?;
            let mut out_w = BufWriter::new(File::create(&out)?);
            let mut trace_w = BufWriter::new(File::create(&trace)?);
            for session in &sessions {
                let selection =
                    end_to_end_select(session, &model, &idx, &selector, k, beam, max_decode_len)?;
                let record = ResponseRecord {
                    query: detokenize(&selection.trace.query, mode),
                    response: detokenize(&selection.response, mode),
                    used_fallback: selection.trace.used_fallback,
                };
                writeln!(out_w, "{}", serde_json::to_string(&record)?)?;
                writeln!(trace_w, "{}", serde_json::to_string(&selection.trace)?)?;
            }
            out_w.flush()?;
            trace_w.flush()?;
            log.info(format!(
                "select: {} sessions → {} (traces {})",
                sessions.len(),
                out.display(),
                trace.display()
            ));
        }
        PipelineCommand::BaselineSelect {
            index,
            ir,
            input,
            out,
            trace,
            k,
            keywords,
            corpus,
        } => {
            let idx = InvertedIndex::load(&index)?;
            let selector = IrModel::load(&ir)?;
            let mode: TokenizeMode = corpus.mode.into();
            let sessions = load_corpus(&input, &corpus, log)?;
            let mut out_w = BufWriter::new(File::create(&out)?);
            let mut trace_w = BufWriter::new(File::create(&trace)?);
            for session in &sessions {
                let selection = baseline_select(session, &idx, &selector, k, keywords)?;
                let record = ResponseRecord {
                    query: detokenize(&selection.trace.query, mode),
                    response: detokenize(&selection.response, mode),
                    used_fallback: selection.trace.used_fallback,
                };
                writeln!(out_w, "{}", serde_json::to_string(&record)?)?;
                writeln!(trace_w, "{}", serde_json::to_string(&selection.trace)?)?;
            }
            out_w.flush()?;
            trace_w.flush()?;
            log.info(format!(
                "baseline-select: {} sessions → {}",
                sessions.len(),
                out.display()
            ));
        }
    }
    Ok(())
}

fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    name.push('.');
    name.push_str(suffix);
    out.with_file_name(name)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        writeln!(w, "{}", serde_json::to_string(item)?)?;
    }
    w.flush()?;
    Ok(())
}
