//! The `sumkit` command line: `prepare`, `train-tokenizer`, `train`,
//! `summarize` and `evaluate`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
//! Failures also print one JSON object on stderr.

pub mod config;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::data::{self, ArticlePair, DataError};
use crate::decoding::{summarize_with, DecodeError, SummarizeError};
use crate::lm::{self, Checkpoint, LmError};
use crate::metrics::{evaluate_corpus, EmbeddingProvider, HashingEmbedder};
use crate::tokenizer::{build_vocab, TokenizerError, Vocab};
pub use config::{Preset, RunConfig};

const GENERATION_HELP: &str = "\
Generation hyperparameters (summarize flags and config keys):
  temperature           0 ranks beams by model probability   [paper preset: 0]
  top_k                 keep the k most probable tokens       [paper preset: 3]
  top_p                 keep the smallest mass >= p           [paper preset: 0.95]
  num_beams             beam width                            [paper preset: 20]
  early_stopping        stop once num_beams beams finished    [paper preset: true]
  no_repeat_ngram_size  forbid repeating any n-gram           [paper preset: 3]
  repetition_penalty    damp logits of already-seen tokens    [paper preset: 2]";

#[derive(Debug, Parser)]
#[command(name = "sumkit", version, about = "Train and evaluate a small summarization language model", after_help = GENERATION_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean a JSON-Lines corpus and split it into train and test files.
    #[command(after_help = GENERATION_HELP)]
    Prepare(PrepareArgs),
    /// Learn a byte-level BPE vocabulary from formatted training examples.
    #[command(name = "train-tokenizer", after_help = GENERATION_HELP)]
    TrainTokenizer(TokenizerArgs),
    /// Train (or continue training) the language model on formatted pairs.
    #[command(after_help = GENERATION_HELP)]
    Train(TrainArgs),
    /// Generate summaries with beam search.
    #[command(after_help = GENERATION_HELP)]
    Summarize(SummarizeArgs),
    /// Score generated summaries against references.
    #[command(after_help = GENERATION_HELP)]
    Evaluate(EvaluateArgs),
}

/// Declares optional string-valued setting flags named after their config
/// keys, plus a method listing the ones given.
macro_rules! settings {
    ($name:ident { $($field:ident : $help:literal),* $(,)? }) => {
        #[derive(Debug, Clone, Default, Args)]
        pub struct $name {
            $(
                #[arg(long = stringify!($field), value_name = "VALUE", help = $help)]
                pub $field: Option<String>,
            )*
        }

        impl $name {
            pub fn overrides(&self) -> Vec<(&'static str, String)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field), v.clone()));
                    }
                )*
                out
            }
        }
    };
}

settings!(CleaningFlags {
    min_summary_tokens: "Minimum summary length in words",
    max_summary_tokens: "Maximum summary length in words",
    overlap_n: "N-gram order of the article/summary overlap filter",
    min_overlap: "Minimum fraction of summary n-grams found in the article",
    max_overlap: "Maximum fraction of summary n-grams found in the article",
    test_fraction: "Share of pairs held out for testing, as 0.1 or 5770/63435",
    split_seed: "Seed of the split shuffle",
});

settings!(TokenizerFlags {
    vocab_size: "Target vocabulary size including 260 base tokens",
});

settings!(TrainFlags {
    d_model: "Model width",
    n_layers: "Number of transformer blocks",
    n_heads: "Attention heads per block",
    d_ff: "Hidden width of the feed-forward layer",
    max_context: "Longest sequence the model accepts",
    dropout: "Residual dropout rate during training",
    init_seed: "Seed of the parameter initialization",
    learning_rate: "Adam step size",
    batch_size: "Examples per update",
    epochs: "Passes over the training set",
    seed: "Seed of the batch order and dropout masks",
    grad_clip: "Global gradient-norm clip, or none",
    max_len: "Training truncation length in tokens (default max_context)",
    loss_on: "Which tokens carry loss: summary or all",
});

settings!(GenerationFlags {
    temperature: "Softmax temperature in [0, 1]; 0 means deterministic ranking",
    top_k: "Keep only the k most probable tokens, or none",
    top_p: "Keep the smallest set of tokens with mass >= p, or none",
    num_beams: "Beam width",
    early_stopping: "Stop as soon as num_beams hypotheses have finished: true or false",
    no_repeat_ngram_size: "Forbid any n-gram from occurring twice, or none",
    repetition_penalty: "Divide positive (multiply negative) logits of seen tokens by this",
    max_new_tokens: "Generation budget per summary",
    length_penalty: "Exponent a in score / length^a for ranking finished beams",
    penalize_prompt: "Whether prompt tokens count as seen: true or false",
});

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// JSON-Lines corpus with `text` and `summary` fields.
    #[arg(long)]
    pub input: PathBuf,
    /// Directory for train.jsonl, test.jsonl and stats.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Split without applying the cleaning filters.
    #[arg(long)]
    pub skip_clean: bool,
    /// Key = value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: CleaningFlags,
}

#[derive(Debug, Args)]
pub struct TokenizerArgs {
    /// JSON-Lines training pairs.
    #[arg(long)]
    pub input: PathBuf,
    /// Where to write the vocabulary.
    #[arg(long)]
    pub output: PathBuf,
    /// Key = value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: TokenizerFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON-Lines training pairs.
    #[arg(long)]
    pub train: PathBuf,
    /// Vocabulary written by `train-tokenizer`.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Where to write the checkpoint.
    #[arg(long)]
    pub output: PathBuf,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Key = value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary written by `train-tokenizer`.
    #[arg(long)]
    pub vocab: PathBuf,
    /// JSON-Lines records with a `text` field.
    #[arg(long, conflicts_with = "text", required_unless_present = "text")]
    pub input: Option<PathBuf>,
    /// Summarize a single article given inline.
    #[arg(long)]
    pub text: Option<String>,
    /// Output JSON-Lines file; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Named bundle of generation settings applied before the config file.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Key = value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: GenerationFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Output of `summarize` (records with `generated`).
    #[arg(long, requires = "reference", conflicts_with = "paired")]
    pub generated: Option<PathBuf>,
    /// References aligned by line (records with `summary` or `reference`).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Records carrying both `generated` and `reference` (or `summary`).
    #[arg(long, required_unless_present = "generated")]
    pub paired: Option<PathBuf>,
    /// Write the JSON report here instead of after the table on stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Skip the embedding-based score.
    #[arg(long)]
    pub no_bertscore: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data { message: String, line: Option<usize> },
    Divergence { step: u64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data { .. } => 2,
            CliError::Divergence { .. } => 3,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            CliError::Usage(m) => json!({ "error": "usage", "message": m }),
            CliError::Data { message, line: Some(line) } => json!({ "error": "data", "message": message, "line": line }),
            CliError::Data { message, line: None } => json!({ "error": "data", "message": message }),
            CliError::Divergence { step } => {
                json!({ "error": "divergence", "message": format!("non-finite loss at step {step}"), "step": step })
            }
        }
    }

    fn data(message: impl ToString) -> Self {
        CliError::Data { message: message.to_string(), line: None }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let line = match &e {
            DataError::Parse { line, .. } | DataError::Schema { line, .. } => Some(*line),
            _ => None,
        };
        match e {
            DataError::Config(m) => CliError::Usage(m),
            e => CliError::Data { message: e.to_string(), line },
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::VocabTooSmall { .. } => CliError::Usage(e.to_string()),
            TokenizerError::Format { line, .. } => CliError::Data { message: e.to_string(), line: Some(line) },
            e => CliError::data(e),
        }
    }
}

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        match e {
            LmError::Divergence { step } => CliError::Divergence { step },
            LmError::Config(_) | LmError::TrainConfig(_) => CliError::Usage(e.to_string()),
            e => CliError::data(e),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e)
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let _ = e.print();
            let err = CliError::Usage(e.kind().to_string());
            eprintln!("{}", err.to_json());
            return err.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Prepare(a) => cmd_prepare(&a),
        Command::TrainTokenizer(a) => cmd_train_tokenizer(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Summarize(a) => cmd_summarize(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}

fn resolve(preset: Option<Preset>, file: Option<&Path>, overrides: &[(&str, String)]) -> Result<RunConfig, CliError> {
    if let Some(f) = file {
        require_file(f)?;
    }
    RunConfig::resolve(preset, file, overrides).map_err(CliError::Usage)
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::data(format!("{}: no such file", path.display())))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn cmd_prepare(a: &PrepareArgs) -> Result<(), CliError> {
    require_file(&a.input)?;
    let cfg = resolve(None, a.config.as_deref(), &a.settings.overrides())?;
    let pairs = data::load_corpus(&a.input)?;
    let (kept, stats) = if a.skip_clean { (pairs, None) } else {
        let (kept, stats) = data::clean(&pairs, &cfg.cleaning)?;
        (kept, Some(stats))
    };
    let (train, test) = data::split(&kept, cfg.test_fraction, cfg.split_seed)?;
    std::fs::create_dir_all(&a.out_dir)?;
    data::write_corpus(a.out_dir.join("train.jsonl"), &train)?;
    data::write_corpus(a.out_dir.join("test.jsonl"), &test)?;
    let report = json!({
        "cleaning": stats,
        "train": train.len(),
        "test": test.len(),
        "test_fraction": cfg.test_fraction,
        "split_seed": cfg.split_seed,
    });
    std::fs::write(a.out_dir.join("stats.json"), format!("{}\n", serde_json::to_string_pretty(&report).expect("plain JSON")))?;
    println!("{}", json!({ "train": train.len(), "test": test.len() }));
    Ok(())
}

/// Strings the tokenizer learns from: each pair's prompt and completion.
pub fn tokenizer_corpus(pairs: &[ArticlePair]) -> Vec<String> {
    pairs.iter().flat_map(|p| <[String; 2]>::from(data::example_segments(p))).collect()
}

pub fn cmd_train_tokenizer(a: &TokenizerArgs) -> Result<(), CliError> {
    require_file(&a.input)?;
    let cfg = resolve(None, a.config.as_deref(), &a.settings.overrides())?;
    let pairs = data::load_corpus(&a.input)?;
    let vocab = build_vocab(&tokenizer_corpus(&pairs), cfg.vocab_size)?;
    vocab.save(&a.output)?;
    println!("{}", json!({ "vocab_size": vocab.len(), "merges": vocab.merges().len() }));
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    for path in [Some(&a.train), Some(&a.vocab), a.init.as_ref()].into_iter().flatten() {
        require_file(path)?;
    }
    let cfg = resolve(None, a.config.as_deref(), &a.settings.overrides())?;
    let vocab = Vocab::load(&a.vocab)?;
    let ckpt = match &a.init {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config().vocab_size != vocab.len() {
                return Err(CliError::Usage(format!(
                    "checkpoint vocabulary {} does not match vocab file {}",
                    ckpt.config().vocab_size,
                    vocab.len()
                )));
            }
            ckpt
        }
        None => lm::init_model(&cfg.model.with_vocab(vocab.len()), cfg.init_seed)?,
    };
    let max_context = ckpt.config().max_context;
    let max_len = cfg.max_len.unwrap_or(max_context);
    if max_len > max_context {
        return Err(CliError::Usage(format!("max_len {max_len} exceeds max_context {max_context}")));
    }
    let pairs = data::load_corpus(&a.train)?;
    let corpus = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            data::encode_pair(&vocab, p, max_len, cfg.loss_on)
                .map_err(|e| CliError::Data { message: format!("record {}: {e}", i + 1), line: Some(i + 1) })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let stdout = std::io::stdout();
    let (trained, _) = lm::train_with(&ckpt, &corpus, &cfg.train, |s| {
        let _ = writeln!(stdout.lock(), "{}", json!({ "epoch": s.epoch, "mean_loss": s.mean_loss, "steps": s.steps }));
    })?;
    trained.save(&a.output)?;
    Ok(())
}

/// Reads JSON-Lines objects, skipping blank lines; errors carry line numbers.
fn read_records(path: &Path) -> Result<Vec<(usize, serde_json::Map<String, Value>)>, CliError> {
    let file = File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(map)) => out.push((i + 1, map)),
            Ok(_) => return Err(CliError::Data { message: format!("line {}: expected a JSON object", i + 1), line: Some(i + 1) }),
            Err(e) => return Err(CliError::Data { message: format!("line {}: malformed JSON: {e}", i + 1), line: Some(i + 1) }),
        }
    }
    Ok(out)
}

fn string_field(map: &serde_json::Map<String, Value>, keys: &[&str], line: usize) -> Result<String, CliError> {
    for key in keys {
        match map.get(*key) {
            Some(Value::String(s)) => return Ok(s.clone()),
            Some(Value::Null) => return Ok(String::new()),
            _ => {}
        }
    }
    Err(CliError::Data { message: format!("line {line}: missing string field `{}`", keys[0]), line: Some(line) })
}

pub fn cmd_summarize(a: &SummarizeArgs) -> Result<(), CliError> {
    require_file(&a.checkpoint)?;
    require_file(&a.vocab)?;
    if let Some(p) = &a.input {
        require_file(p)?;
    }
    let cfg = resolve(a.preset, a.config.as_deref(), &a.settings.overrides())?;
    cfg.generation.validate()?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let vocab = Vocab::load(&a.vocab)?;
    if ckpt.config().vocab_size != vocab.len() {
        return Err(CliError::Usage(format!(
            "checkpoint vocabulary {} does not match vocab file {}",
            ckpt.config().vocab_size,
            vocab.len()
        )));
    }
    let records: Vec<(String, Option<String>)> = match (&a.input, &a.text) {
        (Some(path), _) => read_records(path)?
            .into_iter()
            .map(|(line, map)| {
                let text = string_field(&map, &["text"], line)?;
                let reference = map.get("summary").and_then(Value::as_str).map(str::to_owned);
                Ok((text, reference))
            })
            .collect::<Result<_, CliError>>()?,
        (None, Some(text)) => vec![(text.clone(), None)],
        (None, None) => unreachable!("clap requires one input"),
    };

    let mut out: Box<dyn Write> = match &a.output {
        Some(path) => Box::new(create(path)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for (text, reference) in records {
        let mut row = serde_json::Map::new();
        row.insert("text".into(), json!(text));
        match summarize_with(&ckpt, &vocab, &text, &cfg.generation) {
            Ok(s) => {
                row.insert("generated".into(), json!(s.text));
                if s.truncated {
                    row.insert("truncated".into(), json!(true));
                }
            }
            Err(SummarizeError::Model(e @ LmError::ContextOverflow { .. })) => {
                row.insert("generated".into(), Value::Null);
                row.insert("error".into(), json!(e.to_string()));
            }
            Err(SummarizeError::Model(e)) => return Err(e.into()),
            Err(SummarizeError::Decode(e)) => return Err(e.into()),
            Err(SummarizeError::Tokenizer(e)) => return Err(e.into()),
        }
        if let Some(r) = reference {
            row.insert("reference".into(), json!(r));
        }
        writeln!(out, "{}", Value::Object(row))?;
    }
    out.flush()?;
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let pairs: Vec<(String, String)> = match (&a.paired, &a.generated, &a.reference) {
        (Some(paired), _, _) => {
            require_file(paired)?;
            read_records(paired)?
                .into_iter()
                .map(|(line, m)| Ok((string_field(&m, &["generated"], line)?, string_field(&m, &["reference", "summary"], line)?)))
                .collect::<Result<_, CliError>>()?
        }
        (None, Some(generated), Some(reference)) => {
            require_file(generated)?;
            require_file(reference)?;
            let g = read_records(generated)?;
            let r = read_records(reference)?;
            if g.len() != r.len() {
                return Err(CliError::data(format!("{} generated records but {} references", g.len(), r.len())));
            }
            g.into_iter()
                .zip(r)
                .map(|((gl, gm), (rl, rm))| Ok((string_field(&gm, &["generated"], gl)?, string_field(&rm, &["summary", "reference"], rl)?)))
                .collect::<Result<_, CliError>>()?
        }
        _ => return Err(CliError::Usage("give --paired, or --generated with --reference".into())),
    };
    let embedder = HashingEmbedder::default();
    let provider: Option<&dyn EmbeddingProvider> = if a.no_bertscore { None } else { Some(&embedder) };
    let report = evaluate_corpus(&pairs, provider);
    let mut stdout = std::io::stdout().lock();
    write!(stdout, "{}", report.to_table())?;
    let json = format!("{}\n", report.to_json());
    match &a.output {
        Some(path) => std::fs::write(path, json).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?,
        None => write!(stdout, "{json}")?,
    }
    Ok(())
}
