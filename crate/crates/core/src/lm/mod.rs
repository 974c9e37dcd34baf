//! A small decoder-only transformer (pre-layer-norm GPT block) with a
//! hand-written backward pass, Adam fine-tuning loop and a binary
//! checkpoint container.

mod checkpoint;
mod model;
pub(crate) mod ops;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use checkpoint::CHECKPOINT_VERSION;
pub use model::{DecodeState, Logits};
pub use train::{train, train_with, EpochStats, TrainConfig, TrainExample, TrainReport};

use crate::tokenizer::TokenId;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {0} is outside the model vocabulary")]
    TokenOutOfRange(TokenId),
    #[error("loss mask selects no target positions")]
    EmptyLossMask,
    #[error("loss mask has length {mask}, sequence has length {tokens}")]
    MaskLength { mask: usize, tokens: usize },
    #[error("non-finite loss at step {step}")]
    Divergence { step: u64 },
    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Laptop-CPU scale defaults.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig { vocab_size, d_model: 128, n_layers: 4, n_heads: 4, d_ff: 512, max_context: 512, dropout: 0.0 }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_context", self.max_context),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(LmError::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(LmError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LmError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn range(self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockLayout {
    pub ln1_gain: Span,
    pub ln1_bias: Span,
    pub qkv_weight: Span,
    pub qkv_bias: Span,
    pub proj_weight: Span,
    pub proj_bias: Span,
    pub ln2_gain: Span,
    pub ln2_bias: Span,
    pub fc_weight: Span,
    pub fc_bias: Span,
    pub out_weight: Span,
    pub out_bias: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) span: Span,
}

/// Where each named tensor lives in the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub tok_emb: Span,
    pub pos_emb: Span,
    pub blocks: Vec<BlockLayout>,
    pub lnf_gain: Span,
    pub lnf_bias: Span,
    pub head: Span,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

impl Layout {
    fn new(c: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product();
            let span = Span { offset: total, len };
            total += len;
            tensors.push(TensorInfo { name, shape, span });
            span
        };
        let (v, d, f) = (c.vocab_size, c.d_model, c.d_ff);
        let tok_emb = add("tok_emb".into(), vec![v, d]);
        let pos_emb = add("pos_emb".into(), vec![c.max_context, d]);
        let blocks = (0..c.n_layers)
            .map(|i| {
                let mut t = |suffix: &str, shape: Vec<usize>| add(format!("blocks.{i}.{suffix}"), shape);
                BlockLayout {
                    ln1_gain: t("ln1.gain", vec![d]),
                    ln1_bias: t("ln1.bias", vec![d]),
                    qkv_weight: t("attn.qkv.weight", vec![d, 3 * d]),
                    qkv_bias: t("attn.qkv.bias", vec![3 * d]),
                    proj_weight: t("attn.proj.weight", vec![d, d]),
                    proj_bias: t("attn.proj.bias", vec![d]),
                    ln2_gain: t("ln2.gain", vec![d]),
                    ln2_bias: t("ln2.bias", vec![d]),
                    fc_weight: t("mlp.fc.weight", vec![d, f]),
                    fc_bias: t("mlp.fc.bias", vec![f]),
                    out_weight: t("mlp.proj.weight", vec![f, d]),
                    out_bias: t("mlp.proj.bias", vec![d]),
                }
            })
            .collect();
        let lnf_gain = add("ln_f.gain".into(), vec![d]);
        let lnf_bias = add("ln_f.bias".into(), vec![d]);
        let head = add("lm_head.weight".into(), vec![d, v]);
        Layout { tok_emb, pos_emb, blocks, lnf_gain, lnf_bias, head, tensors, total }
    }
}

/// Model configuration plus learned parameters, stored flat in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
    pub training_step: u64,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&TensorInfo, &[f64])> {
        self.layout.tensors.iter().map(|t| (t, &self.params[t.span.range()]))
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.tensors.iter().find(|t| t.name == name).map(|t| &self.params[t.span.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let span = self.layout.tensors.iter().find(|t| t.name == name)?.span;
        Some(&mut self.params[span.range()])
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<f64>, training_step: u64) -> Result<Self, LmError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(LmError::Format(format!("expected {} parameters, got {}", layout.total, params.len())));
        }
        Ok(Checkpoint { config, layout, params, training_step })
    }
}

const INIT_STD: f64 = 0.02;

/// Normal(0, 0.02) weights, residual output projections additionally scaled
/// by 1/sqrt(2 * n_layers); unit layer-norm gains; zero biases.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Checkpoint, LmError> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; layout.total];
    let residual_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
    let mut fill = |span: Span, std: f64, rng: &mut ChaCha8Rng| {
        let normal = Normal::new(0.0, std).expect("positive std");
        for p in &mut params[span.range()] {
            *p = normal.sample(rng);
        }
    };
    fill(layout.tok_emb, INIT_STD, &mut rng);
    fill(layout.pos_emb, INIT_STD, &mut rng);
    for b in &layout.blocks {
        fill(b.qkv_weight, INIT_STD, &mut rng);
        fill(b.proj_weight, residual_std, &mut rng);
        fill(b.fc_weight, INIT_STD, &mut rng);
        fill(b.out_weight, residual_std, &mut rng);
    }
    fill(layout.head, INIT_STD, &mut rng);
    let gains = layout
        .blocks
        .iter()
        .flat_map(|b| [b.ln1_gain, b.ln2_gain])
        .chain([layout.lnf_gain]);
    for span in gains {
        params[span.range()].fill(1.0);
    }
    Ok(Checkpoint { config: config.clone(), layout, params, training_step: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 64, d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_context: 64, dropout: 0.0 }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&tiny(), 3).unwrap();
        let b = init_model(&tiny(), 3).unwrap();
        assert_eq!(a, b);
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, init_model(&tiny(), 4).unwrap());
        assert_eq!(a.training_step, 0);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig { d_model: 8, n_heads: 3, ..tiny() };
        assert!(matches!(init_model(&cfg, 0), Err(LmError::Config(_))));
        let cfg = ModelConfig { dropout: 1.0, ..tiny() };
        assert!(matches!(init_model(&cfg, 0), Err(LmError::Config(_))));
    }

    #[test]
    fn parameter_count_matches_shapes() {
        let (v, d, l, f, ctx) = (64, 16, 2, 32, 64);
        let per_block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let expected = v * d + ctx * d + l * per_block + 2 * d + d * v;
        // 1024 + 1024 + 2 * 2224 + 32 + 1024
        assert_eq!(expected, 7552);
        assert_eq!(init_model(&tiny(), 0).unwrap().num_parameters(), expected);
    }

    #[test]
    fn named_tensors_cover_params() {
        let ckpt = init_model(&tiny(), 0).unwrap();
        let total: usize = ckpt.tensors().map(|(t, data)| {
            assert_eq!(t.shape.iter().product::<usize>(), data.len());
            data.len()
        }).sum();
        assert_eq!(total, ckpt.num_parameters());
        assert!(ckpt.tensor("blocks.1.ln2.gain").unwrap().iter().all(|&g| g == 1.0));
        assert!(ckpt.tensor("blocks.0.attn.proj.bias").unwrap().iter().all(|&g| g == 0.0));
    }
}
