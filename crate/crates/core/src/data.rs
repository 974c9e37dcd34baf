//! Corpus ingestion, cleaning filters, train/test splitting and the
//! prompt templates the model is trained and queried with.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::TrainExample;
use crate::tokenizer::Vocab;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: malformed JSON: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    Schema { line: usize, field: &'static str },
    #[error("summary has fewer than {n} tokens")]
    TooShort { n: usize },
    #[error("need at least 2 examples to split, got {0}")]
    TooFewExamples(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("example needs {len} tokens even with an empty article, limit is {max}")]
    ExampleTooLong { len: usize, max: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticlePair {
    pub text: String,
    pub summary: String,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub date: String,
    #[serde(default)]
    pub url: String,
}

impl ArticlePair {
    pub fn new(text: impl Into<String>, summary: impl Into<String>) -> Self {
        ArticlePair { text: text.into(), summary: summary.into(), ..Default::default() }
    }
}

/// Summary-length and source-overlap filters. The defaults are tuning
/// choices for this toolkit, not published thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningConfig {
    pub min_summary_tokens: usize,
    pub max_summary_tokens: usize,
    pub overlap_n: usize,
    pub min_overlap: f64,
    pub max_overlap: f64,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        CleaningConfig {
            min_summary_tokens: 15,
            max_summary_tokens: 120,
            overlap_n: 2,
            min_overlap: 0.1,
            max_overlap: 0.9,
        }
    }
}

impl CleaningConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: &str| Err(DataError::Config(m.to_string()));
        if self.min_summary_tokens == 0 || self.min_summary_tokens >= self.max_summary_tokens {
            return err("need 0 < min_summary_tokens < max_summary_tokens");
        }
        if self.overlap_n == 0 {
            return err("overlap_n must be positive");
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.min_overlap) || !unit.contains(&self.max_overlap) || self.min_overlap >= self.max_overlap {
            return err("need 0 <= min_overlap < max_overlap <= 1");
        }
        Ok(())
    }
}

/// How many pairs each filter removed. A pair failing several filters is
/// counted once, under the first filter it fails (length before overlap).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanStats {
    pub input: usize,
    pub kept: usize,
    pub empty: usize,
    pub summary_too_short: usize,
    pub summary_too_long: usize,
    pub overlap_too_low: usize,
    pub overlap_too_high: usize,
}

/// Reads a JSON-Lines corpus. Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<ArticlePair>, DataError> {
    let file = std::fs::File::open(path)?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(parse_record(&line, i + 1)?);
    }
    Ok(pairs)
}

pub fn parse_record(line: &str, line_no: usize) -> Result<ArticlePair, DataError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| DataError::Parse { line: line_no, message: e.to_string() })?;
    let obj = value
        .as_object()
        .ok_or_else(|| DataError::Parse { line: line_no, message: "record is not a JSON object".into() })?;
    let field = |name: &'static str, required: bool| -> Result<String, DataError> {
        match obj.get(name) {
            Some(serde_json::Value::String(s)) => Ok(s.clone()),
            Some(serde_json::Value::Null) | None if !required => Ok(String::new()),
            Some(serde_json::Value::Null) | None => Err(DataError::Schema { line: line_no, field: name }),
            Some(_) => Err(DataError::Parse { line: line_no, message: format!("field `{name}` is not a string") }),
        }
    };
    Ok(ArticlePair {
        text: field("text", true)?,
        summary: field("summary", true)?,
        title: field("title", false)?,
        date: field("date", false)?,
        url: field("url", false)?,
    })
}

pub fn write_corpus(path: impl AsRef<Path>, pairs: &[ArticlePair]) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for pair in pairs {
        serde_json::to_writer(&mut out, pair).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Lowercased whitespace tokens; the filter runs before any BPE vocab exists.
pub fn filter_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Fraction of distinct summary n-grams that also occur in the text.
pub fn ngram_overlap(text: &str, summary: &str, n: usize) -> Result<f64, DataError> {
    let summary = filter_tokens(summary);
    if n == 0 || summary.len() < n {
        return Err(DataError::TooShort { n });
    }
    let text = filter_tokens(text);
    let source: HashSet<&[String]> = text.windows(n).collect();
    let distinct: HashSet<&[String]> = summary.windows(n).collect();
    let shared = distinct.iter().filter(|g| source.contains(*g)).count();
    Ok(shared as f64 / distinct.len() as f64)
}

/// Keeps pairs whose summary length and n-gram overlap fall inside the
/// configured bounds (inclusive), preserving order.
pub fn clean(pairs: &[ArticlePair], cfg: &CleaningConfig) -> Result<(Vec<ArticlePair>, CleanStats), DataError> {
    cfg.validate()?;
    let mut stats = CleanStats { input: pairs.len(), ..Default::default() };
    let mut kept = Vec::new();
    for pair in pairs {
        if pair.text.trim().is_empty() || pair.summary.trim().is_empty() {
            stats.empty += 1;
            continue;
        }
        let len = filter_tokens(&pair.summary).len();
        if len < cfg.min_summary_tokens {
            stats.summary_too_short += 1;
            continue;
        }
        if len > cfg.max_summary_tokens {
            stats.summary_too_long += 1;
            continue;
        }
        match ngram_overlap(&pair.text, &pair.summary, cfg.overlap_n) {
            Ok(o) if o < cfg.min_overlap => stats.overlap_too_low += 1,
            Ok(o) if o > cfg.max_overlap => stats.overlap_too_high += 1,
            Ok(_) => kept.push(pair.clone()),
            // shorter than overlap_n: only reachable when min_summary_tokens < overlap_n
            Err(_) => stats.summary_too_short += 1,
        }
    }
    stats.kept = kept.len();
    Ok((kept, stats))
}

/// Number of test examples for a given corpus size and fraction, kept
/// within `1..=n-1` so neither side is empty.
pub fn test_size(n: usize, test_fraction: f64) -> usize {
    ((test_fraction * n as f64).round() as usize).clamp(1, n - 1)
}

/// Seeded shuffle followed by a prefix cut: the first `test_size` shuffled
/// pairs become the test set. Both halves keep the shuffled order.
pub fn split(
    pairs: &[ArticlePair],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<ArticlePair>, Vec<ArticlePair>), DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Config(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    if pairs.len() < 2 {
        return Err(DataError::TooFewExamples(pairs.len()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = test_size(pairs.len(), test_fraction);
    let test = order[..n_test].iter().map(|&i| pairs[i].clone()).collect();
    let train = order[n_test..].iter().map(|&i| pairs[i].clone()).collect();
    Ok((train, test))
}

/// Training sequence: `<s>Text:{text} <|sep|> Summary:{summary} </s>`.
pub fn format_example(pair: &ArticlePair) -> String {
    format!("<s>Text:{} <|sep|> Summary:{} </s>", pair.text, pair.summary)
}

/// Inference prompt: `Text:{text} <|sep|> Summary:` (no BOS, no trailing space).
pub fn format_prompt(text: &str) -> String {
    format!("Text:{text} <|sep|> Summary:")
}

/// Longest character prefix of `text` accepted by `fits`, found by binary
/// search on the assumption that acceptance is monotone in prefix length.
/// `None` when even the empty prefix is rejected.
pub fn fit_text(text: &str, fits: impl Fn(&str) -> bool) -> Option<&str> {
    if fits(text) {
        return Some(text);
    }
    let mut bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).collect();
    bounds.push(text.len());
    // bounds[lo] fits (or lo == 0 unchecked), bounds[hi] does not
    let (mut lo, mut hi) = (0, bounds.len() - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if fits(&text[..bounds[mid]]) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Token counts are not strictly monotone in characters, so walk down
    // until the candidate is actually accepted.
    (0..=lo).rev().map(|i| &text[..bounds[i]]).find(|p| fits(p))
}

/// Which positions of a formatted example contribute to the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossTarget {
    /// Only tokens after the separator: the summary and its EOS.
    #[default]
    Summary,
    /// Every next-token prediction in the sequence.
    All,
}

/// The two halves of `format_example`: the BOS-prefixed inference prompt
/// and the completion the model learns to produce after it.
pub fn example_segments(pair: &ArticlePair) -> (String, String) {
    (format!("<s>{}", format_prompt(&pair.text)), format!("{} </s>", pair.summary))
}

/// Encodes a pair for training, shortening the article from its end until
/// the sequence fits in `max_len` tokens. Prompt and completion are encoded
/// separately so the prompt tokens match what inference feeds the model.
pub fn encode_pair(vocab: &Vocab, pair: &ArticlePair, max_len: usize, target: LossTarget) -> Result<TrainExample, DataError> {
    let completion = vocab.encode(&example_segments(pair).1);
    let prompt = |text: &str| vocab.encode(&format!("<s>{}", format_prompt(text)));
    let text = fit_text(&pair.text, |t| prompt(t).len() + completion.len() <= max_len)
        .ok_or_else(|| DataError::ExampleTooLong { len: prompt("").len() + completion.len(), max: max_len })?;
    let mut tokens = prompt(text);
    let prompt_len = tokens.len();
    tokens.extend(completion);
    let loss_mask = match target {
        LossTarget::All => vec![true; tokens.len()],
        LossTarget::Summary => (0..tokens.len()).map(|i| i >= prompt_len).collect(),
    };
    Ok(TrainExample { tokens, loss_mask })
}
