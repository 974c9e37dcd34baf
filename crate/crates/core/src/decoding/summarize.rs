use thiserror::Error;

use super::beam::{beam_search, BeamError, ForcedEos, LogitsSource};
use super::{DecodeError, GenerationConfig};
use crate::data::{fit_text, format_prompt};
use crate::lm::{Checkpoint, DecodeState, LmError};
use crate::tokenizer::{TokenId, TokenizerError, Vocab};

impl LogitsSource for Checkpoint {
    type State = DecodeState;
    type Error = LmError;

    fn start(&self, prompt: &[TokenId]) -> Result<(DecodeState, Vec<f64>), LmError> {
        self.prefill(prompt)
    }

    fn extend(&self, state: &DecodeState, token: TokenId) -> Result<(DecodeState, Vec<f64>), LmError> {
        let mut next = state.clone();
        let logits = self.step(&mut next, token)?;
        Ok((next, logits))
    }
}

#[derive(Debug, Error)]
pub enum SummarizeError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Model(#[from] LmError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

impl From<BeamError<LmError>> for SummarizeError {
    fn from(e: BeamError<LmError>) -> Self {
        match e {
            BeamError::Decode(e) => SummarizeError::Decode(e),
            BeamError::Source(e) => SummarizeError::Model(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub log_score: f64,
    /// Whether the article had to be shortened to fit the context.
    pub truncated: bool,
    pub forced_eos: Vec<ForcedEos>,
}

pub fn summarize(ckpt: &Checkpoint, vocab: &Vocab, article: &str, cfg: &GenerationConfig) -> Result<String, SummarizeError> {
    Ok(summarize_with(ckpt, vocab, article, cfg)?.text)
}

/// Generates a continuation of `<s>` + the inference prompt. Articles too
/// long for `max_context` keep their leading characters; only the tokens after
/// the prompt are decoded, with EOS removed and surrounding whitespace trimmed.
pub fn summarize_with(ckpt: &Checkpoint, vocab: &Vocab, article: &str, cfg: &GenerationConfig) -> Result<Summary, SummarizeError> {
    cfg.validate()?;
    if cfg.max_new_tokens == 0 {
        return Ok(Summary { text: String::new(), tokens: Vec::new(), log_score: 0.0, truncated: false, forced_eos: Vec::new() });
    }
    let max = ckpt.config().max_context;
    // The final generated token is never fed back, hence the `- 1`.
    let budget = max.saturating_sub(cfg.max_new_tokens - 1);
    let encode = |text: &str| {
        let mut ids = vec![vocab.bos()];
        ids.extend(vocab.encode(&format_prompt(text)));
        ids
    };
    let (prompt, truncated) = match fit_text(article, |t| encode(t).len() <= budget) {
        Some(t) => (encode(t), t.len() < article.len()),
        None => {
            let len = encode("").len() + cfg.max_new_tokens - 1;
            return Err(LmError::ContextOverflow { len, max }.into());
        }
    };
    let out = beam_search(ckpt, &prompt, cfg, vocab.eos())?;
    let ids: Vec<TokenId> = out.best.tokens.iter().copied().filter(|&t| t != vocab.eos()).collect();
    let text = vocab.decode(&ids)?.trim().to_string();
    Ok(Summary { text, tokens: out.best.tokens, log_score: out.best.log_score, truncated, forced_eos: out.forced_eos })
}
