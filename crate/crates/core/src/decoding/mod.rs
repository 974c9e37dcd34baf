//! Deterministic beam-search generation with the usual logit processors:
//! repetition penalty, temperature, top-k and top-p filtering and a
//! no-repeat-n-gram ban, applied in that order.

mod beam;
mod summarize;

use std::collections::BTreeSet;

use thiserror::Error;

pub use beam::{beam_search, BeamOutput, ForcedEos, Hypothesis, LogitsSource, PrefixFn};
pub use summarize::{summarize, summarize_with, Summary, SummarizeError};

use crate::lm::ops::softmax_in_place;
use crate::tokenizer::TokenId;

#[derive(Debug, Error, PartialEq)]
pub enum DecodeError {
    #[error("repetition penalty must be >= 1, got {0}")]
    InvalidPenalty(f64),
    #[error("top-k needs k >= 1")]
    InvalidK,
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("prompt is empty")]
    EmptyPrompt,
}

/// Decoding hyperparameters. Names follow the common generation-library
/// spelling so config files and flags read the same.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    /// In [0, 1]. Zero ranks candidates by the untempered model probabilities.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub num_beams: usize,
    pub early_stopping: bool,
    pub no_repeat_ngram_size: Option<usize>,
    pub repetition_penalty: f64,
    pub max_new_tokens: usize,
    /// Exponent α in `score / len^α` for ranking finished hypotheses; 0 disables.
    pub length_penalty: f64,
    /// Whether prompt tokens count as already generated for the repetition
    /// penalty and the n-gram ban.
    pub penalize_prompt: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            temperature: 0.0,
            top_k: None,
            top_p: None,
            num_beams: 1,
            early_stopping: false,
            no_repeat_ngram_size: None,
            repetition_penalty: 1.0,
            max_new_tokens: 64,
            length_penalty: 0.0,
            penalize_prompt: true,
        }
    }
}

impl GenerationConfig {
    /// The replication preset: τ=0, 20 beams, early stopping, no repeated
    /// trigrams, repetition penalty 2, top-k 3 and top-p 0.95.
    pub fn paper() -> Self {
        GenerationConfig {
            temperature: 0.0,
            top_k: Some(3),
            top_p: Some(0.95),
            num_beams: 20,
            early_stopping: true,
            no_repeat_ngram_size: Some(3),
            repetition_penalty: 2.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::Config(m));
        if !(0.0..=1.0).contains(&self.temperature) {
            return bad(format!("temperature {} outside [0, 1]", self.temperature));
        }
        if self.top_k == Some(0) {
            return Err(DecodeError::InvalidK);
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("top_p {p} outside (0, 1]"));
            }
        }
        if self.num_beams == 0 {
            return bad("num_beams must be positive".into());
        }
        if self.no_repeat_ngram_size == Some(0) {
            return bad("no_repeat_ngram_size must be positive".into());
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(DecodeError::InvalidPenalty(self.repetition_penalty));
        }
        if !self.length_penalty.is_finite() {
            return bad("length_penalty must be finite".into());
        }
        Ok(())
    }
}

/// Softmax of `logits / temperature`; at zero temperature a one-hot at the
/// first maximal entry.
pub fn apply_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        let mut out = vec![0.0; logits.len()];
        if let Some(best) = argmax(logits) {
            out[best] = 1.0;
        }
        return out;
    }
    let mut out: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    softmax_in_place(&mut out);
    out
}

/// Lowest index among the maximal entries.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Positive logits of seen tokens are divided by `penalty`, negative ones
/// multiplied by it.
pub fn apply_repetition_penalty(logits: &[f64], seen: &BTreeSet<TokenId>, penalty: f64) -> Result<Vec<f64>, DecodeError> {
    if !(penalty >= 1.0) {
        return Err(DecodeError::InvalidPenalty(penalty));
    }
    let mut out = logits.to_vec();
    for &t in seen {
        if let Some(l) = out.get_mut(t as usize) {
            if *l > 0.0 {
                *l /= penalty;
            } else if *l < 0.0 {
                *l *= penalty;
            }
        }
    }
    Ok(out)
}

/// Indices by descending probability, ties to the lower index.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

fn keep_and_renormalize(probs: &[f64], keep: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for &i in keep {
        out[i] = probs[i];
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|p| *p /= total);
    }
    out
}

/// Zeroes all but the `k` most probable entries and renormalizes.
pub fn filter_top_k(probs: &[f64], k: usize) -> Result<Vec<f64>, DecodeError> {
    if k == 0 {
        return Err(DecodeError::InvalidK);
    }
    if k >= probs.len() {
        return Ok(probs.to_vec());
    }
    let order = ranked(probs);
    Ok(keep_and_renormalize(probs, &order[..k]))
}

/// Slack on the cumulative-mass comparison so a prefix that reaches `p` up
/// to rounding still counts as reaching it.
const TOP_P_SLACK: f64 = 1e-12;

/// Keeps the shortest descending-probability prefix whose mass reaches `p`,
/// including the entry that crosses the threshold, and renormalizes.
pub fn filter_top_p(probs: &[f64], p: f64) -> Vec<f64> {
    if p >= 1.0 {
        return probs.to_vec();
    }
    let order = ranked(probs);
    let mut cumulative = 0.0;
    let mut cut = order.len();
    for (n, &i) in order.iter().enumerate() {
        cumulative += probs[i];
        if cumulative >= p - TOP_P_SLACK {
            cut = n + 1;
            break;
        }
    }
    keep_and_renormalize(probs, &order[..cut])
}

/// Tokens whose addition would close an n-gram already present in `prefix`.
pub fn banned_ngram_continuations(prefix: &[TokenId], n: usize) -> BTreeSet<TokenId> {
    let mut banned = BTreeSet::new();
    if n == 0 || prefix.len() < n {
        return banned;
    }
    let tail = &prefix[prefix.len() + 1 - n..];
    for window in prefix.windows(n) {
        if &window[..n - 1] == tail {
            banned.insert(window[n - 1]);
        }
    }
    banned
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9)
    }

    #[test]
    fn temperature() {
        // e^1, e^2, e^3 over their sum
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expected = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        let got = apply_temperature(&[1.0, 2.0, 3.0], 1.0);
        assert!(close(&got, &expected));
        assert!(close(&got, &[0.0900, 0.2447, 0.6652].map(|x: f64| x)) || got.iter().zip([0.0900, 0.2447, 0.6652]).all(|(a, b)| (a - b).abs() < 1e-4));
        assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(apply_temperature(&[1.0, 2.0, 3.0], 0.0), vec![0.0, 0.0, 1.0]);
        assert_eq!(apply_temperature(&[5.0, 5.0], 0.0), vec![1.0, 0.0]);
    }

    #[test]
    fn repetition_penalty() {
        let seen = |ids: &[TokenId]| ids.iter().copied().collect::<BTreeSet<_>>();
        assert_eq!(apply_repetition_penalty(&[2.0, -1.0], &seen(&[0]), 2.0).unwrap(), vec![1.0, -1.0]);
        assert_eq!(apply_repetition_penalty(&[2.0, -1.0], &seen(&[1]), 2.0).unwrap(), vec![2.0, -2.0]);
        assert_eq!(apply_repetition_penalty(&[0.0, 3.0], &seen(&[0, 1]), 1.0).unwrap(), vec![0.0, 3.0]);
        assert_eq!(apply_repetition_penalty(&[0.0], &seen(&[0, 7]), 3.0).unwrap(), vec![0.0]);
        assert_eq!(apply_repetition_penalty(&[1.0], &seen(&[0]), 0.5), Err(DecodeError::InvalidPenalty(0.5)));
    }

    #[test]
    fn top_k() {
        let p = [0.5, 0.3, 0.15, 0.05];
        assert_eq!(filter_top_k(&p, 1).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert!(close(&filter_top_k(&p, 2).unwrap(), &[0.625, 0.375, 0.0, 0.0]));
        assert_eq!(filter_top_k(&p, 4).unwrap(), p.to_vec());
        assert_eq!(filter_top_k(&p, 9).unwrap(), p.to_vec());
        assert_eq!(filter_top_k(&p, 0), Err(DecodeError::InvalidK));
        // boundary tie keeps the lower index
        assert_eq!(filter_top_k(&[0.25, 0.5, 0.25], 2).unwrap(), vec![1.0 / 3.0, 2.0 / 3.0, 0.0]);
    }

    #[test]
    fn top_p() {
        let p = [0.5, 0.3, 0.15, 0.05];
        assert!(close(&filter_top_p(&p, 0.8), &[0.625, 0.375, 0.0, 0.0]));
        assert_eq!(filter_top_p(&p, 1.0), p.to_vec());
        assert_eq!(filter_top_p(&p, 0.5), vec![1.0, 0.0, 0.0, 0.0]);
        assert!(close(&filter_top_p(&p, 0.81), &[0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0]));
    }

    #[test]
    fn ngram_bans() {
        let (a, b, c) = (1, 2, 3);
        assert_eq!(banned_ngram_continuations(&[a, b, c, a, b], 3), BTreeSet::from([c]));
        assert!(banned_ngram_continuations(&[], 3).is_empty());
        assert!(banned_ngram_continuations(&[a, b], 3).is_empty());
        assert_eq!(banned_ngram_continuations(&[a, a, a], 1), BTreeSet::from([a]));
        assert_eq!(banned_ngram_continuations(&[a, b, a, c, a], 2), BTreeSet::from([b, c]));
    }

    #[test]
    fn config_validation() {
        assert!(GenerationConfig::default().validate().is_ok());
        assert!(GenerationConfig::paper().validate().is_ok());
        let bad = [
            GenerationConfig { temperature: 1.5, ..Default::default() },
            GenerationConfig { top_p: Some(0.0), ..Default::default() },
            GenerationConfig { num_beams: 0, ..Default::default() },
            GenerationConfig { no_repeat_ngram_size: Some(0), ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(DecodeError::Config(_))), "{cfg:?}");
        }
        assert_eq!(GenerationConfig { top_k: Some(0), ..Default::default() }.validate(), Err(DecodeError::InvalidK));
        assert_eq!(
            GenerationConfig { repetition_penalty: 0.9, ..Default::default() }.validate(),
            Err(DecodeError::InvalidPenalty(0.9))
        );
    }

    fn distribution() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..10.0, 1..12).prop_map(|v| {
            let mut v = v;
            v[0] += 0.1;
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn full_filters_are_identities(p in distribution()) {
            prop_assert_eq!(filter_top_k(&p, p.len()).unwrap(), p.clone());
            prop_assert_eq!(filter_top_p(&p, 1.0), p);
        }

        #[test]
        fn filters_preserve_survivor_order(p in distribution(), k in 1usize..12, top in 0.05f64..1.0) {
            for q in [filter_top_k(&p, k).unwrap(), filter_top_p(&p, top)] {
                prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for i in 0..p.len() {
                    for j in 0..p.len() {
                        if q[i] > 0.0 && q[j] > 0.0 && p[i] < p[j] {
                            prop_assert!(q[i] < q[j]);
                        }
                        if q[i] > 0.0 && q[j] == 0.0 {
                            prop_assert!(p[i] >= p[j]);
                        }
                    }
                }
            }
        }

        #[test]
        fn penalty_never_promotes_seen_tokens(
            logits in proptest::collection::vec(-5.0f64..5.0, 2..10),
            seen_mask in proptest::collection::vec(any::<bool>(), 10),
            penalty in 1.0f64..4.0,
        ) {
            let seen: BTreeSet<TokenId> = (0..logits.len()).filter(|&i| seen_mask[i]).map(|i| i as TokenId).collect();
            let after = apply_repetition_penalty(&logits, &seen, penalty).unwrap();
            for &s in &seen {
                let s = s as usize;
                if logits[s] <= 0.0 { continue; }
                for u in (0..logits.len()).filter(|u| !seen.contains(&(*u as TokenId))) {
                    if logits[s] <= logits[u] {
                        prop_assert!(after[s] <= after[u]);
                    }
                }
            }
        }

        #[test]
        fn ngram_ban_matches_enumeration(prefix in proptest::collection::vec(0u32..4, 0..12), n in 1usize..4) {
            let banned = banned_ngram_continuations(&prefix, n);
            for t in 0..4u32 {
                let mut ext = prefix.clone();
                ext.push(t);
                let repeats = ext.len() >= n && {
                    let last = &ext[ext.len() - n..];
                    ext.windows(n).take(ext.len() - n).any(|w| w == last)
                };
                prop_assert_eq!(banned.contains(&t), repeats);
            }
        }
    }
}
