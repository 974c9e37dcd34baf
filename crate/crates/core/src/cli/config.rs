//! Flat `key = value` settings shared by every subcommand. Later sources
//! override earlier ones: built-in defaults, then `--preset`, then the
//! `--config` file, then command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{CleaningConfig, LossTarget};
use crate::decoding::GenerationConfig;
use crate::lm::TrainConfig;

/// Model dimensions minus the vocabulary size, which comes from the vocab file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub dropout: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        let d = crate::lm::ModelConfig::desk(0);
        ModelDims { d_model: d.d_model, n_layers: d.n_layers, n_heads: d.n_heads, d_ff: d.d_ff, max_context: d.max_context, dropout: d.dropout }
    }
}

impl ModelDims {
    pub fn with_vocab(&self, vocab_size: usize) -> crate::lm::ModelConfig {
        crate::lm::ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_context: self.max_context,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub cleaning: CleaningConfig,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub vocab_size: usize,
    pub model: ModelDims,
    pub init_seed: u64,
    pub train: TrainConfig,
    /// Training-time sequence cap; defaults to `max_context`.
    pub max_len: Option<usize>,
    pub loss_on: LossTarget,
    pub generation: GenerationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cleaning: CleaningConfig::default(),
            test_fraction: 0.1,
            split_seed: 0,
            vocab_size: 1024,
            model: ModelDims::default(),
            init_seed: 0,
            train: TrainConfig::default(),
            max_len: None,
            loss_on: LossTarget::Summary,
            generation: GenerationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Default,
    Paper,
}

/// Every key the config file accepts.
pub const KEYS: &[&str] = &[
    "min_summary_tokens",
    "max_summary_tokens",
    "overlap_n",
    "min_overlap",
    "max_overlap",
    "test_fraction",
    "split_seed",
    "vocab_size",
    "d_model",
    "n_layers",
    "n_heads",
    "d_ff",
    "max_context",
    "dropout",
    "init_seed",
    "learning_rate",
    "batch_size",
    "epochs",
    "seed",
    "grad_clip",
    "max_len",
    "loss_on",
    "temperature",
    "top_k",
    "top_p",
    "num_beams",
    "early_stopping",
    "no_repeat_ngram_size",
    "repetition_penalty",
    "max_new_tokens",
    "length_penalty",
    "penalize_prompt",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.trim().parse().map_err(|_| format!("invalid value for {key}: {value:?}"))
}

/// `none` (or empty) disables an optional setting.
fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>, String> {
    match value.trim() {
        "" | "none" => Ok(None),
        v => num(key, v).map(Some),
    }
}

fn boolean(key: &str, value: &str) -> Result<bool, String> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid value for {key}: {value:?} (expected true or false)")),
    }
}

/// A plain fraction or a ratio `a/b`.
pub fn fraction(key: &str, value: &str) -> Result<f64, String> {
    match value.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (num(key, a)?, num(key, b)?);
            Ok(a / b)
        }
        None => num(key, value),
    }
}

impl RunConfig {
    pub fn apply_preset(&mut self, preset: Preset) {
        if preset == Preset::Paper {
            let max_new_tokens = self.generation.max_new_tokens;
            self.generation = GenerationConfig { max_new_tokens, ..GenerationConfig::paper() };
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let g = &mut self.generation;
        let c = &mut self.cleaning;
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "min_summary_tokens" => c.min_summary_tokens = num(key, value)?,
            "max_summary_tokens" => c.max_summary_tokens = num(key, value)?,
            "overlap_n" => c.overlap_n = num(key, value)?,
            "min_overlap" => c.min_overlap = num(key, value)?,
            "max_overlap" => c.max_overlap = num(key, value)?,
            "test_fraction" => self.test_fraction = fraction(key, value)?,
            "split_seed" => self.split_seed = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "d_model" => m.d_model = num(key, value)?,
            "n_layers" => m.n_layers = num(key, value)?,
            "n_heads" => m.n_heads = num(key, value)?,
            "d_ff" => m.d_ff = num(key, value)?,
            "max_context" => m.max_context = num(key, value)?,
            "dropout" => m.dropout = num(key, value)?,
            "init_seed" => self.init_seed = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "grad_clip" => t.grad_clip = optional(key, value)?,
            "max_len" => self.max_len = optional(key, value)?,
            "loss_on" => {
                self.loss_on = match value.trim() {
                    "summary" => LossTarget::Summary,
                    "all" => LossTarget::All,
                    _ => return Err(format!("invalid value for loss_on: {value:?} (expected summary or all)")),
                }
            }
            "temperature" => g.temperature = num(key, value)?,
            "top_k" => g.top_k = optional(key, value)?,
            "top_p" => g.top_p = optional(key, value)?,
            "num_beams" => g.num_beams = num(key, value)?,
            "early_stopping" => g.early_stopping = boolean(key, value)?,
            "no_repeat_ngram_size" => g.no_repeat_ngram_size = optional(key, value)?,
            "repetition_penalty" => g.repetition_penalty = num(key, value)?,
            "max_new_tokens" => g.max_new_tokens = num(key, value)?,
            "length_penalty" => g.length_penalty = num(key, value)?,
            "penalize_prompt" => g.penalize_prompt = boolean(key, value)?,
            _ => return Err(format!("unknown setting {key:?}")),
        }
        Ok(())
    }

    /// Builds the effective config: defaults, preset, file, then `overrides`
    /// in order.
    pub fn resolve(preset: Option<Preset>, file: Option<&Path>, overrides: &[(&str, String)]) -> Result<Self, String> {
        let mut cfg = RunConfig::default();
        let file_entries = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
                parse_file(&text)?
            }
            None => BTreeMap::new(),
        };
        // A preset named in the file counts as part of the file layer only
        // if no preset flag was given.
        let preset = match (preset, file_entries.get("preset")) {
            (Some(p), _) => Some(p),
            (None, Some(v)) => Some(match v.as_str() {
                "paper" => Preset::Paper,
                "default" => Preset::Default,
                _ => return Err(format!("invalid value for preset: {v:?}")),
            }),
            (None, None) => None,
        };
        if let Some(p) = preset {
            cfg.apply_preset(p);
        }
        for (k, v) in file_entries.iter().filter(|(k, _)| k.as_str() != "preset") {
            cfg.set(k, v)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

/// `key = value` lines; `#` starts a comment; blank lines are ignored.
pub fn parse_file(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("config line {}: expected key = value", i + 1))?;
        let key = k.trim().replace('-', "_");
        if key != "preset" && !KEYS.contains(&key.as_str()) {
            return Err(format!("config line {}: unknown setting {key:?}", i + 1));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}
