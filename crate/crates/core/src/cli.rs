//! The `dcgcn` command line: preprocess, train, generate, evaluate, grad-check, ablate.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::graph::{
    build_vocab, parse_dependency_corpus, parse_penman_corpus, read_jsonl, to_extended_levi, write_jsonl, Example, GraphEntry,
    GraphKind, Vocabulary,
};
use crate::inference::generate;
use crate::metrics::{evaluate, ScoreReport};
use crate::model::{gradient_fixture, gradient_fixture_check, Graph2Seq, ModelConfig};
use crate::training::{ablate, evaluate_loss, parse_graph_kind, train, Ablation, RunConfig, StopReason, TrainOutcome};

#[derive(Debug, Parser)]
#[command(name = "dcgcn", version, about = "Graph-to-sequence generation with densely connected graph convolutions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub shared: Shared,
}

/// Flags accepted by every command.
#[derive(Debug, Args)]
pub struct Shared {
    /// key=value run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Beam width; 1 decodes greedily
    #[arg(long, global = true, default_value_t = 1)]
    pub beam: usize,
    #[arg(long, global = true)]
    pub max_epochs: Option<usize>,
    /// Comma-separated modules to remove, e.g. `coverage,dense:2`
    #[arg(long, global = true)]
    pub ablation: Option<String>,
    /// amr or dep
    #[arg(long, global = true)]
    pub graph_type: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Raw PENMAN or CoNLL graphs to JSONL plus a vocabulary
    Preprocess {
        /// Reuse this vocabulary instead of building one
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train on JSONL examples, keeping the best dev checkpoint
    Train {
        /// Dev JSONL; by default the last tenth of the input is held out
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Vocabulary; by default `<input>.vocab`
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Decode sentences for JSONL graphs
    Generate {
        /// Token budget per sentence; by default twice the node count plus ten
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score sentences against references
    Evaluate {
        #[arg(long)]
        references: PathBuf,
        /// JSONL graphs giving the size of each example
        #[arg(long, conflicts_with = "sizes")]
        graphs: Option<PathBuf>,
        /// One graph size per line
        #[arg(long)]
        sizes: Option<PathBuf>,
        #[arg(long)]
        case_sensitive: bool,
    },
    /// Finite-difference check of the loss gradient
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train the full model and an ablated one, then compare them on dev
    Ablate {
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = io::stdout();
    match run(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("dcgcn: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let s = &cli.shared;
    match &cli.command {
        Command::Preprocess { vocab } => preprocess(s, vocab.as_deref(), out),
        Command::Train { dev, vocab } => train_command(s, dev.as_deref(), vocab.as_deref(), out),
        Command::Generate { max_len } => generate_command(s, *max_len, out),
        Command::Evaluate {
            references,
            graphs,
            sizes,
            case_sensitive,
        } => evaluate_command(s, references, graphs.as_deref(), sizes.as_deref(), *case_sensitive, out),
        Command::GradCheck { tolerance } => grad_check(s, *tolerance, out),
        Command::Ablate { dev, vocab } => ablate_command(s, dev.as_deref(), vocab.as_deref(), out),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(Error::io(format!("creating {}", dir.display()))),
        None => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    ensure_parent(path)?;
    File::create(path)
        .map(BufWriter::new)
        .map_err(Error::io(format!("creating {}", path.display())))
}

fn write_io(path: &Path) -> impl FnOnce(io::Error) -> Error {
    Error::io(format!("writing {}", path.display()))
}

fn read_vocab(path: &Path) -> Result<Vocabulary> {
    Ok(Vocabulary::read(open(path)?)?)
}

fn write_vocab(vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    vocab.write(&mut w).and_then(|_| w.flush()).map_err(write_io(path))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    open(path)?
        .lines()
        .collect::<io::Result<_>>()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Defaults, then the config file, then command-line flags.
fn run_config(s: &Shared) -> Result<RunConfig> {
    let mut kv = match &s.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            KeyValues::parse(&text)?
        }
        None => KeyValues::default(),
    };
    if let Some(seed) = s.seed {
        kv.set("seed", seed.to_string());
    }
    if let Some(e) = s.max_epochs {
        kv.set("max_epochs", e.to_string());
    }
    if let Some(a) = &s.ablation {
        kv.set("ablation", a.clone());
    }
    if let Some(g) = &s.graph_type {
        kv.set("graph_type", g.clone());
    }
    RunConfig::from_kv(kv)
}

fn graph_kind(s: &Shared) -> Result<GraphKind> {
    parse_graph_kind(s.graph_type.as_deref().unwrap_or("amr"))
}

fn preprocess(s: &Shared, vocab_path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let input = required(&s.input, "input")?;
    let output = required(&s.output, "output")?;
    let kind = graph_kind(s)?;
    let min_count = run_config(s)?.min_count;
    let text = fs::read_to_string(input).map_err(|e| Error::Input(format!("{}: {e}", input.display())))?;
    let entries: Vec<GraphEntry> = match kind {
        GraphKind::Amr => parse_penman_corpus(&text)?,
        GraphKind::Dependency => parse_dependency_corpus(&text)?,
    };
    let vocab = match vocab_path {
        Some(p) => read_vocab(p)?,
        None => build_vocab(&entries, min_count)?,
    };
    let sequential = kind == GraphKind::Dependency;
    let examples: Vec<Example> = entries
        .iter()
        .map(|e| Example {
            graph: to_extended_levi(&e.graph, sequential).to_ids(&vocab),
            target: e.target.iter().flatten().map(|w| vocab.id(w)).collect(),
        })
        .collect();
    write_jsonl(&examples, create(output)?).map_err(write_io(output))?;
    let vocab_out = sidecar(output, "vocab");
    write_vocab(&vocab, &vocab_out)?;
    writeln!(
        out,
        "{} graphs -> {} ({} tokens in {})",
        examples.len(),
        output.display(),
        vocab.len(),
        vocab_out.display()
    )
    .map_err(write_io(Path::new("stdout")))
}

fn load_examples(path: &Path, edge_types: usize) -> Result<Vec<Example>> {
    Ok(read_jsonl(open(path)?, edge_types)?)
}

/// Training and dev examples plus the vocabulary they index.
fn training_data(s: &Shared, cfg: &RunConfig, dev: Option<&Path>, vocab: Option<&Path>) -> Result<(Vec<Example>, Vec<Example>, Vocabulary)> {
    let input = required(&s.input, "input")?;
    let vocab = read_vocab(&vocab.map_or_else(|| sidecar(input, "vocab"), Path::to_path_buf))?;
    let edge_types = cfg.model.encoder.edge_types;
    let mut train_set = load_examples(input, edge_types)?;
    let dev_set = match dev {
        Some(p) => load_examples(p, edge_types)?,
        None => {
            if train_set.len() < 2 {
                return Err(Error::Input("need at least two examples to hold out a dev set".into()));
            }
            let held = (train_set.len() / 10).max(1);
            train_set.split_off(train_set.len() - held)
        }
    };
    let bad = train_set.iter().chain(&dev_set).flat_map(|e| e.graph.tokens.iter().chain(&e.target)).find(|&&t| t >= vocab.len());
    if let Some(t) = bad {
        return Err(Error::Input(format!("token id {t} is outside the {}-token vocabulary", vocab.len())));
    }
    Ok((train_set, dev_set, vocab))
}

fn model_config(cfg: &RunConfig, vocab: &Vocabulary) -> Result<ModelConfig> {
    let mut model = cfg.model.clone();
    model.vocab_size = vocab.len();
    ablate(&model, &cfg.train.ablation)
}

fn fit(cfg: &RunConfig, model: ModelConfig, train_set: &[Example], dev_set: &[Example], out: &mut dyn Write) -> Result<TrainOutcome> {
    let model = Graph2Seq::new(model, cfg.train.seed)?;
    let mut log_err = None;
    let outcome = train(model, train_set, dev_set, &cfg.train, |r| {
        if let Err(e) = writeln!(
            out,
            "epoch {:>3}  train {:.4}  dev {:.4}  ppl {:.3}",
            r.epoch, r.train_loss, r.dev_loss, r.dev_perplexity
        ) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(write_io(Path::new("stdout"))(e));
    }
    Ok(outcome)
}

fn train_command(s: &Shared, dev: Option<&Path>, vocab: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let checkpoint = required(&s.checkpoint, "checkpoint")?;
    let cfg = run_config(s)?;
    let (train_set, dev_set, vocab) = training_data(s, &cfg, dev, vocab)?;
    let model = model_config(&cfg, &vocab)?;
    let outcome = fit(&cfg, model, &train_set, &dev_set, out)?;
    ensure_parent(checkpoint)?;
    outcome.best.save(checkpoint)?;
    write_vocab(&vocab, &sidecar(checkpoint, "vocab"))?;
    let history = json!({
        "seed": cfg.train.seed,
        "ablation": cfg.train.ablation.to_string(),
        "best_epoch": outcome.best_epoch,
        "stop": outcome.stop.to_string(),
        "epochs": outcome.history,
    });
    let hist_path = sidecar(checkpoint, "history.json");
    let mut w = create(&hist_path)?;
    serde_json::to_writer_pretty(&mut w, &history)
        .map_err(io::Error::from)
        .and_then(|_| w.flush())
        .map_err(write_io(&hist_path))?;
    writeln!(
        out,
        "best epoch {} ({}), seed {} -> {}",
        outcome.best_epoch,
        outcome.stop,
        cfg.train.seed,
        checkpoint.display()
    )
    .map_err(write_io(Path::new("stdout")))?;
    match outcome.stop {
        StopReason::Diverged(reason) => Err(Error::Diverged {
            epoch: outcome.history.len() + 1,
            reason,
        }),
        _ => Ok(()),
    }
}

fn decode_all(model: &Graph2Seq, vocab: &Vocabulary, examples: &[Example], beam: usize, max_len: Option<usize>) -> Result<Vec<String>> {
    examples
        .iter()
        .map(|e| Ok(vocab.detokenize(&generate(model, &e.graph, beam, max_len, true)?)))
        .collect()
}

fn generate_command(s: &Shared, max_len: Option<usize>, out: &mut dyn Write) -> Result<()> {
    let checkpoint = required(&s.checkpoint, "checkpoint")?;
    let input = required(&s.input, "input")?;
    let model = Graph2Seq::load(checkpoint)?;
    let vocab = read_vocab(&sidecar(checkpoint, "vocab"))?;
    let examples = load_examples(input, model.config().encoder.edge_types)?;
    let sentences = decode_all(&model, &vocab, &examples, s.beam, max_len)?;
    match &s.output {
        Some(p) => {
            let mut w = create(p)?;
            sentences
                .iter()
                .try_for_each(|l| writeln!(w, "{l}"))
                .and_then(|_| w.flush())
                .map_err(write_io(p))?;
            writeln!(out, "{} sentences -> {}", sentences.len(), p.display()).map_err(write_io(Path::new("stdout")))
        }
        None => sentences
            .iter()
            .try_for_each(|l| writeln!(out, "{l}"))
            .map_err(write_io(Path::new("stdout"))),
    }
}

/// Levi node count of each graph, the global node excluded.
fn graph_sizes(examples: &[Example]) -> Vec<usize> {
    examples
        .iter()
        .map(|e| e.graph.node_count() - usize::from(e.graph.global_index.is_some()))
        .collect()
}

fn report_json(report: &ScoreReport, seed: Option<u64>) -> serde_json::Value {
    let mut v = serde_json::to_value(report).expect("report serializes");
    v["seed"] = json!(seed);
    v
}

fn evaluate_command(
    s: &Shared,
    references: &Path,
    graphs: Option<&Path>,
    sizes: Option<&Path>,
    case_sensitive: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let hyps = read_lines(required(&s.input, "input")?)?;
    let refs = read_lines(references)?;
    let sizes = match (graphs, sizes) {
        (Some(g), _) => Some(graph_sizes(&load_examples(g, 6)?)),
        (None, Some(p)) => Some(
            read_lines(p)?
                .iter()
                .map(|l| l.trim().parse().map_err(|_| Error::Input(format!("bad graph size `{l}`"))))
                .collect::<Result<Vec<usize>>>()?,
        ),
        (None, None) => None,
    };
    let report = evaluate(&hyps, &refs, sizes.as_deref(), case_sensitive)?;
    write!(out, "{}", report.table()).map_err(write_io(Path::new("stdout")))?;
    if let Some(p) = &s.output {
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &report_json(&report, s.seed))
            .map_err(io::Error::from)
            .and_then(|_| w.flush())
            .map_err(write_io(p))?;
    }
    Ok(())
}

fn grad_check(s: &Shared, tolerance: f64, out: &mut dyn Write) -> Result<()> {
    let seed = s.seed.unwrap_or(1);
    let (mut model, examples) = match &s.checkpoint {
        Some(ckpt) => {
            let model = Graph2Seq::load(ckpt)?;
            let input = required(&s.input, "input")?;
            let mut examples = load_examples(input, model.config().encoder.edge_types)?;
            examples.truncate(1);
            if examples.is_empty() {
                return Err(Error::Input(format!("{} has no examples", input.display())));
            }
            (model, examples)
        }
        None => gradient_fixture(seed)?,
    };
    let report = gradient_fixture_check(&mut model, &examples, tolerance, seed)?;
    let stdout = |e| write_io(Path::new("stdout"))(e);
    writeln!(
        out,
        "seed {seed}: {} entries, loss {:.6}, max relative error {:.3e}, rounding floor {:.1e}",
        report.entries.len(),
        report.loss,
        report.max_rel_error(),
        report.rounding_floor()
    )
    .map_err(stdout)?;
    for f in report.failures() {
        let note = if report.resolvable(f) { "" } else { "  (below the rounding floor)" };
        writeln!(out, "  {}[{}] analytic {:.6e} numeric {:.6e}{note}", f.param, f.index, f.analytic, f.numeric).map_err(stdout)?;
    }
    if report.passed() {
        writeln!(out, "PASS tolerance={tolerance:e}").map_err(stdout)
    } else {
        writeln!(out, "FAIL tolerance={tolerance:e}").map_err(stdout)?;
        let unresolved = report.failures().filter(|f| !report.resolvable(f)).count();
        Err(Error::Numeric(format!(
            "{} of {} entries exceed relative error {tolerance:e} ({unresolved} of them below the rounding floor)",
            report.failures().count(),
            report.entries.len()
        )))
    }
}

struct VariantScore {
    perplexity: f64,
    report: ScoreReport,
}

fn score_variant(model: &Graph2Seq, vocab: &Vocabulary, dev_set: &[Example], cfg: &RunConfig, beam: usize) -> Result<VariantScore> {
    let (_, perplexity) = evaluate_loss(model, dev_set, cfg.train.batch_size)?;
    let hyps = decode_all(model, vocab, dev_set, beam, None)?;
    let refs: Vec<String> = dev_set.iter().map(|e| vocab.detokenize(&e.target)).collect();
    let report = evaluate(&hyps, &refs, Some(&graph_sizes(dev_set)), false)?;
    Ok(VariantScore { perplexity, report })
}

fn ablate_command(s: &Shared, dev: Option<&Path>, vocab: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let cfg = run_config(s)?;
    if cfg.train.ablation.is_empty() {
        return Err(Error::Config("--ablation names no module to remove".into()));
    }
    let (train_set, dev_set, vocab) = training_data(s, &cfg, dev, vocab)?;
    let stdout = |e| write_io(Path::new("stdout"))(e);
    let mut scores = Vec::new();
    for ablation in [Ablation::default(), cfg.train.ablation.clone()] {
        let mut run = cfg.clone();
        run.train.ablation = ablation.clone();
        writeln!(out, "== {ablation}").map_err(stdout)?;
        let outcome = fit(&run, model_config(&run, &vocab)?, &train_set, &dev_set, out)?;
        if let StopReason::Diverged(reason) = &outcome.stop {
            return Err(Error::Diverged {
                epoch: outcome.history.len() + 1,
                reason: reason.clone(),
            });
        }
        scores.push((ablation, score_variant(&outcome.best, &vocab, &dev_set, &run, s.beam)?));
    }
    let (full, variant) = (&scores[0].1, &scores[1].1);
    writeln!(out, "{:<28} {:>8} {:>8} {:>8}", "model", "BLEU", "chrF++", "dev ppl").map_err(stdout)?;
    for (a, v) in &scores {
        let name = if a.is_empty() { "full".to_string() } else { format!("-{{{a}}}") };
        writeln!(out, "{name:<28} {:>8.2} {:>8.2} {:>8.3}", v.report.bleu, v.report.chrf, v.perplexity).map_err(stdout)?;
    }
    writeln!(
        out,
        "{:<28} {:>+8.2} {:>+8.2} {:>+8.3}",
        "delta",
        variant.report.bleu - full.report.bleu,
        variant.report.chrf - full.report.chrf,
        variant.perplexity - full.perplexity
    )
    .map_err(stdout)?;
    if let Some(p) = &s.output {
        let summary = json!({
            "seed": cfg.train.seed,
            "ablation": cfg.train.ablation.to_string(),
            "full": { "dev_perplexity": full.perplexity, "scores": report_json(&full.report, None) },
            "ablated": { "dev_perplexity": variant.perplexity, "scores": report_json(&variant.report, None) },
            "delta": {
                "bleu": variant.report.bleu - full.report.bleu,
                "chrf": variant.report.chrf - full.report.chrf,
                "dev_perplexity": variant.perplexity - full.perplexity,
            },
        });
        let mut w = create(p)?;
        serde_json::to_writer_pretty(&mut w, &summary)
            .map_err(io::Error::from)
            .and_then(|_| w.flush())
            .map_err(write_io(p))?;
    }
    Ok(())
}
