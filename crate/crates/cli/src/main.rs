use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use iur_core::data::{dataset_to_jsonl, load_dataset, read_text, write_text, LabelRecord};
use iur_core::dialogue::{derive_connection_words, detokenize, tokenize, ConnectionWordList, TokenizationMode};
use iur_core::generate::EditProgram;
use iur_core::metrics::{ContextWords, EvalOptions, RougeScore};
use iur_core::supervision::{build_gold_matrix, Coverage};
use iur_core::synth::{generate_synthetic, SyntheticSpec};
use iur_core::train::{bench_latency, evaluate_predictions, train, Rewriter, RunConfig};

#[derive(Parser)]
#[command(name = "iur", version, about = "Rewrite incomplete dialogue utterances by predicting edit matrices")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Derive gold edit matrices for a dataset.
    DeriveLabels(DeriveLabelsArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Rewrite every example of a dataset with a trained model.
    Rewrite(RewriteArgs),
    /// Score predictions (or a model) against gold rewrites.
    Eval(EvalArgs),
    /// Measure per-example rewrite latency.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Whitespace,
    PerCharacter,
}

impl From<Mode> for TokenizationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Whitespace => TokenizationMode::Whitespace,
            Mode::PerCharacter => TokenizationMode::PerCharacter,
        }
    }
}

#[derive(Args)]
struct DeriveLabelsArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the derived connection words, one per line.
    #[arg(long)]
    connection_out: Option<PathBuf>,
    #[arg(long)]
    connection_words: Option<usize>,
    #[arg(long, value_enum)]
    tokenization: Option<Mode>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_examples: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    /// JSON file with a full synthetic spec.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    connection_words: Option<usize>,
    #[arg(long, value_enum)]
    tokenization: Option<Mode>,
    /// Continue from `<checkpoint>.last` when it exists.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct RewriteArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Gold dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output of `rewrite`; without it the model in --checkpoint is run.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report ROUGE recall instead of F1.
    #[arg(long)]
    rouge_recall: bool,
    /// Count every context word for rewriting P/R/F, not only those absent from the utterance.
    #[arg(long)]
    all_context_words: bool,
    #[arg(long, value_enum)]
    tokenization: Option<Mode>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RewriteLine {
    rewrite_pred: String,
    program: EditProgram,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = read_text(path)?;
            serde_json::from_str(&text).with_context(|| format!("{}: invalid run config", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn required<'a>(flag: Option<&'a PathBuf>, config: Option<&'a PathBuf>, name: &str) -> Result<&'a Path> {
    match flag.or(config) {
        Some(p) => Ok(p),
        None => bail!("missing --{name} (or \"{}\" in the config)", name.replace('-', "_")),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_text(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn derive_labels(config: RunConfig, args: &DeriveLabelsArgs) -> Result<()> {
    let mode = args.tokenization.map_or(config.tokenization, Into::into);
    let data_path = required(args.data.as_ref(), config.train.as_ref(), "data")?;
    let examples = load_dataset(data_path, mode, true)?;
    let conn = derive_connection_words(&examples, args.connection_words.unwrap_or(config.connection_words));
    let mut lines = String::new();
    let mut partial = 0;
    for (i, ex) in examples.iter().enumerate() {
        let (y, coverage) = build_gold_matrix(ex, &conn, conn.len()).with_context(|| format!("example {}", i + 1))?;
        if coverage == Coverage::Partial {
            partial += 1;
        }
        lines += &serde_json::to_string(&LabelRecord::new(&y, coverage))?;
        lines.push('\n');
    }
    let out = args.out.as_deref().or(config.labels.as_deref());
    emit(out, &lines)?;
    if let Some(path) = &args.connection_out {
        write_text(path, &conn.to_text())?;
    }
    let summary = serde_json::json!({
        "examples": examples.len(),
        "partial": partial,
        "connection_words": conn.words(),
    });
    if out.is_some() {
        print!("{}", pretty(&summary));
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

fn synth(cli_seed: Option<u64>, args: &SynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &args.spec {
        Some(path) => {
            serde_json::from_str(&read_text(path)?).with_context(|| format!("{}: invalid spec", path.display()))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(n) = args.num_examples {
        spec.num_examples = n;
    }
    if let Some(v) = args.vocab_size {
        spec.vocab_size = v;
    }
    if let Some(seed) = cli_seed {
        spec.seed = seed;
    }
    let examples = generate_synthetic(&spec)?;
    write_text(&args.out, &dataset_to_jsonl(&examples, TokenizationMode::Whitespace))?;
    print!("{}", pretty(&serde_json::json!({ "examples": examples.len(), "out": args.out })));
    Ok(())
}

fn run_train(mut config: RunConfig, args: &TrainArgs) -> Result<()> {
    let set = |slot: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut config.epochs, args.epochs);
    set(&mut config.model.batch_size, args.batch_size);
    set(&mut config.model.embed_dim, args.embed_dim);
    set(&mut config.model.hidden_dim, args.hidden_dim);
    set(&mut config.model.base_channels, args.base_channels);
    set(&mut config.connection_words, args.connection_words);
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if args.patience.is_some() {
        config.patience = args.patience;
    }
    if let Some(m) = args.tokenization {
        config.tokenization = m.into();
    }
    let train_path = required(args.train.as_ref(), config.train.as_ref(), "train")?.to_path_buf();
    let checkpoint = required(args.checkpoint.as_ref(), config.checkpoint.as_ref(), "checkpoint")?.to_path_buf();
    let train_set = load_dataset(&train_path, config.tokenization, true)?;
    let dev_path = args.dev.clone().or(config.dev.clone());
    let dev_set = match &dev_path {
        Some(p) => load_dataset(p, config.tokenization, true)?,
        None => Vec::new(),
    };
    let outcome = train(&config, &train_set, &dev_set, Some(&checkpoint), args.resume)?;
    print!(
        "{}",
        pretty(&serde_json::json!({
            "checkpoint": checkpoint,
            "best_epoch": outcome.best_epoch,
            "labels": outcome.labels,
            "history": outcome.history,
        }))
    );
    Ok(())
}

fn load_rewriter(flag: Option<&PathBuf>, config: &RunConfig) -> Result<Rewriter> {
    let path = required(flag, config.checkpoint.as_ref(), "checkpoint")?;
    Ok(Rewriter::load(path)?)
}

fn rewrite(config: RunConfig, args: &RewriteArgs) -> Result<()> {
    let rewriter = load_rewriter(args.checkpoint.as_ref(), &config)?;
    let data = required(args.data.as_ref(), config.test.as_ref(), "data")?;
    let examples = load_dataset(data, rewriter.mode, false)?;
    let mut lines = String::new();
    for ex in &examples {
        let rw = rewriter.rewrite(ex)?;
        let line = RewriteLine { rewrite_pred: detokenize(&rw.tokens, rewriter.mode), program: rw.program };
        lines += &serde_json::to_string(&line)?;
        lines.push('\n');
    }
    emit(args.out.as_deref(), &lines)
}

fn parse_predictions(path: &Path, mode: TokenizationMode) -> Result<Vec<Vec<iur_core::dialogue::Token>>> {
    let mut preds = Vec::new();
    for (i, line) in read_text(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        let Some(text) = value.get("rewrite_pred").and_then(|v| v.as_str()) else {
            bail!("{}: line {}: missing \"rewrite_pred\"", path.display(), i + 1);
        };
        preds.push(tokenize(text, mode));
    }
    Ok(preds)
}

fn eval(config: RunConfig, args: &EvalArgs) -> Result<()> {
    let options = EvalOptions {
        rouge: if args.rouge_recall { RougeScore::Recall } else { RougeScore::F1 },
        context_words: if args.all_context_words { ContextWords::InContext } else { ContextWords::NotInUtterance },
    };
    let data = required(args.data.as_ref(), config.test.as_ref(), "data")?;
    let rewriter = match (&args.checkpoint, &args.predictions) {
        (None, Some(_)) => None,
        (flag, _) => Some(load_rewriter(flag.as_ref(), &config)?),
    };
    let mode = args.tokenization.map(Into::into).or(rewriter.as_ref().map(|r| r.mode)).unwrap_or(config.tokenization);
    let examples = load_dataset(data, mode, true)?;
    let (conn, k) = match &rewriter {
        Some(r) => (r.conn.clone(), r.k),
        None => (ConnectionWordList::empty(), 0),
    };
    let preds = match (&args.predictions, &rewriter) {
        (Some(path), _) => parse_predictions(path, mode)?,
        (None, Some(r)) => examples.iter().map(|ex| r.rewrite(ex).map(|rw| rw.tokens)).collect::<Result<_, _>>()?,
        (None, None) => unreachable!("a rewriter is loaded when no predictions are given"),
    };
    if preds.len() != examples.len() {
        bail!("{} predictions for {} gold examples", preds.len(), examples.len());
    }
    let report = evaluate_predictions(&preds, &examples, &conn, k, options)?;
    let text = pretty(&report);
    if let Some(out) = &args.out {
        write_text(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn bench(config: RunConfig, args: &BenchArgs) -> Result<()> {
    let rewriter = load_rewriter(args.checkpoint.as_ref(), &config)?;
    let data = required(args.data.as_ref(), config.test.as_ref(), "data")?;
    let examples = load_dataset(data, rewriter.mode, false)?;
    let report = bench_latency(&rewriter, &examples)?;
    emit(args.out.as_deref(), &pretty(&report))
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    match &cli.command {
        Command::DeriveLabels(a) => derive_labels(config, a),
        Command::Synth(a) => synth(cli.seed, a),
        Command::Train(a) => run_train(config, a),
        Command::Rewrite(a) => rewrite(config, a),
        Command::Eval(a) => eval(config, a),
        Command::Bench(a) => bench(config, a),
    }
}

fn error_json(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_json("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json("runtime", &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
