use std::collections::BTreeSet;
use std::convert::Infallible;

use super::{apply_repetition_penalty, banned_ngram_continuations, filter_top_k, filter_top_p, DecodeError, GenerationConfig};
use crate::lm::ops::softmax_in_place;
use crate::tokenizer::TokenId;

/// Incremental next-token logits. `start` consumes the prompt, `extend`
/// appends one token to a state without mutating it.
pub trait LogitsSource {
    type State: Clone;
    type Error;

    fn start(&self, prompt: &[TokenId]) -> Result<(Self::State, Vec<f64>), Self::Error>;
    fn extend(&self, state: &Self::State, token: TokenId) -> Result<(Self::State, Vec<f64>), Self::Error>;
}

/// Adapts a plain `prefix -> logits` function. The prefix passed in is the
/// prompt followed by the generated tokens.
pub struct PrefixFn<F>(pub F);

impl<F: Fn(&[TokenId]) -> Vec<f64>> LogitsSource for PrefixFn<F> {
    type State = Vec<TokenId>;
    type Error = Infallible;

    fn start(&self, prompt: &[TokenId]) -> Result<(Vec<TokenId>, Vec<f64>), Infallible> {
        Ok((prompt.to_vec(), (self.0)(prompt)))
    }

    fn extend(&self, state: &Vec<TokenId>, token: TokenId) -> Result<(Vec<TokenId>, Vec<f64>), Infallible> {
        let mut prefix = state.clone();
        prefix.push(token);
        let logits = (self.0)(&prefix);
        Ok((prefix, logits))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens only, including the trailing EOS when finished.
    pub tokens: Vec<TokenId>,
    pub log_score: f64,
    pub finished: bool,
}

/// A beam whose filters left no allowed token and was closed with EOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForcedEos {
    pub step: usize,
    pub beam: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    pub best: Hypothesis,
    pub forced_eos: Vec<ForcedEos>,
    pub steps: usize,
}

struct Live<S> {
    tokens: Vec<TokenId>,
    log_score: f64,
    state: S,
    logits: Vec<f64>,
}

struct Candidate {
    score: f64,
    token: TokenId,
    beam: usize,
    forced: bool,
}

/// Model probabilities after the configured processors, in their fixed order.
/// Also returns the pre-filter distribution for forced-EOS scoring.
fn step_distribution(logits: &[f64], history: &[TokenId], cfg: &GenerationConfig) -> Result<(Vec<f64>, Vec<f64>), DecodeError> {
    let seen: BTreeSet<TokenId> = history.iter().copied().collect();
    let mut probs = apply_repetition_penalty(logits, &seen, cfg.repetition_penalty)?;
    // Zero temperature means deterministic ranking by the model's own
    // probabilities, so it shares the unit-temperature softmax.
    if cfg.temperature > 0.0 && cfg.temperature != 1.0 {
        probs.iter_mut().for_each(|l| *l /= cfg.temperature);
    }
    softmax_in_place(&mut probs);
    let unfiltered = probs.clone();
    if let Some(k) = cfg.top_k {
        probs = filter_top_k(&probs, k)?;
    }
    if let Some(p) = cfg.top_p {
        probs = filter_top_p(&probs, p);
    }
    if let Some(n) = cfg.no_repeat_ngram_size {
        for t in banned_ngram_continuations(history, n) {
            if let Some(p) = probs.get_mut(t as usize) {
                *p = 0.0;
            }
        }
    }
    Ok((probs, unfiltered))
}

fn ranking_score(h: &Hypothesis, alpha: f64) -> f64 {
    if alpha == 0.0 {
        h.log_score
    } else {
        h.log_score / (h.tokens.len().max(1) as f64).powf(alpha)
    }
}

/// Inserts into a pool capped at `cap`, keeping the best by ranking score.
/// Earlier entries win ties.
fn push_finished(pool: &mut Vec<Hypothesis>, h: Hypothesis, cap: usize, alpha: f64) {
    let score = ranking_score(&h, alpha);
    let at = pool.iter().position(|p| ranking_score(p, alpha) < score).unwrap_or(pool.len());
    pool.insert(at, h);
    pool.truncate(cap);
}

/// Deterministic beam search. Candidates are ranked by cumulative log
/// probability, ties going to the lower token id and then the lower beam
/// index. An EOS candidate enters the finished pool only when it ranks among
/// the top `num_beams`. When the token budget runs out the remaining live
/// beams compete with the finished ones for the result.
pub fn beam_search<L: LogitsSource>(
    source: &L,
    prompt: &[TokenId],
    cfg: &GenerationConfig,
    eos: TokenId,
) -> Result<BeamOutput, BeamError<L::Error>> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(DecodeError::EmptyPrompt.into());
    }
    let beams = cfg.num_beams;
    let alpha = cfg.length_penalty;
    let mut forced_eos = Vec::new();
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut live: Vec<Live<L::State>> = Vec::new();
    let mut steps = 0;
    let mut stopped_early = false;

    if cfg.max_new_tokens > 0 {
        let (state, logits) = source.start(prompt).map_err(BeamError::Source)?;
        live.push(Live { tokens: Vec::new(), log_score: 0.0, state, logits });
    }

    let mut history = Vec::new();
    for step in 0..cfg.max_new_tokens {
        steps = step + 1;
        let mut candidates = Vec::new();
        for (b, beam) in live.iter().enumerate() {
            history.clear();
            if cfg.penalize_prompt {
                history.extend_from_slice(prompt);
            }
            history.extend_from_slice(&beam.tokens);
            let (probs, unfiltered) = step_distribution(&beam.logits, &history, cfg)?;
            let before = candidates.len();
            for (t, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    candidates.push(Candidate { score: beam.log_score + p.ln(), token: t as TokenId, beam: b, forced: false });
                }
            }
            if candidates.len() == before {
                forced_eos.push(ForcedEos { step, beam: b });
                let p = unfiltered.get(eos as usize).copied().unwrap_or(0.0);
                candidates.push(Candidate { score: beam.log_score + p.ln(), token: eos, beam: b, forced: true });
            }
        }
        candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.token.cmp(&b.token)).then(a.beam.cmp(&b.beam)));

        let mut next = Vec::with_capacity(beams);
        for (rank, c) in candidates.iter().enumerate() {
            if next.len() == beams {
                break;
            }
            let parent = &live[c.beam];
            let mut tokens = parent.tokens.clone();
            tokens.push(c.token);
            if c.token == eos || c.forced {
                if rank < beams {
                    push_finished(&mut finished, Hypothesis { tokens, log_score: c.score, finished: true }, beams, alpha);
                }
                continue;
            }
            // The last step's survivors are never expanded, so skip the model call.
            let (state, logits) = if step + 1 < cfg.max_new_tokens {
                source.extend(&parent.state, c.token).map_err(BeamError::Source)?
            } else {
                (parent.state.clone(), Vec::new())
            };
            next.push(Live { tokens, log_score: c.score, state, logits });
        }
        live = next;

        if live.is_empty() {
            stopped_early = true;
            break;
        }
        if finished.len() >= beams {
            let done = cfg.early_stopping || {
                let worst = ranking_score(finished.last().expect("non-empty"), alpha);
                live.iter().all(|l| {
                    let h = Hypothesis { tokens: l.tokens.clone(), log_score: l.log_score, finished: false };
                    ranking_score(&h, alpha) <= worst
                })
            };
            if done {
                stopped_early = true;
                break;
            }
        }
    }

    let mut pool = finished;
    if !stopped_early {
        for l in live {
            push_finished(&mut pool, Hypothesis { tokens: l.tokens, log_score: l.log_score, finished: false }, usize::MAX, alpha);
        }
    }
    let best = pool.into_iter().next().unwrap_or(Hypothesis { tokens: Vec::new(), log_score: 0.0, finished: false });
    Ok(BeamOutput { best, forced_eos, steps })
}

#[derive(Debug, PartialEq)]
pub enum BeamError<E> {
    Decode(DecodeError),
    Source(E),
}

impl<E> From<DecodeError> for BeamError<E> {
    fn from(e: DecodeError) -> Self {
        BeamError::Decode(e)
    }
}

impl<E: std::fmt::Display> std::fmt::Display for BeamError<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BeamError::Decode(e) => e.fmt(f),
            BeamError::Source(e) => e.fmt(f),
        }
    }
}

impl<E: std::error::Error + 'static> std::error::Error for BeamError<E> {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            BeamError::Decode(e) => Some(e),
            BeamError::Source(e) => Some(e),
        }
    }
}
