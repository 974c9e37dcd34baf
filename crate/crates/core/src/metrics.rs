//! Reference-based summary metrics on word tokens: ROUGE-N, ROUGE-L, BLEU
//! and an embedding-matching BERTScore, plus corpus averaging.
//!
//! Every score lies in [0, 1]. Reports print them that way too; multiply by
//! 100 to compare against tables that show ROUGE and BLEU as percentages.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("embedding dimension mismatch: {left} vs {right}")]
    Dimension { left: usize, right: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f1 }
    }
}

/// Why a score was forced to zero instead of computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreFlag {
    /// A text has fewer tokens than the n-gram order.
    ShortText,
    EmptyCandidate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored<T> {
    pub score: T,
    pub flag: Option<ScoreFlag>,
}

impl<T> Scored<T> {
    fn ok(score: T) -> Self {
        Scored { score, flag: None }
    }
}

/// Lowercases, deletes every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Σ over distinct n-grams of min(candidate count, reference count).
fn clipped_matches(cand: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    cand.iter().map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0))).sum()
}

pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Scored<Prf> {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    if n == 0 || c.len() < n || r.len() < n {
        return Scored { score: Prf::default(), flag: Some(ScoreFlag::ShortText) };
    }
    let matches = clipped_matches(&ngram_counts(&c, n), &ngram_counts(&r, n)) as f64;
    let (nc, nr) = ((c.len() + 1 - n) as f64, (r.len() + 1 - n) as f64);
    Scored::ok(Prf::new(matches / nc, matches / nr))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> Scored<Prf> {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    if c.is_empty() || r.is_empty() {
        return Scored { score: Prf::default(), flag: Some(ScoreFlag::ShortText) };
    }
    let l = lcs_len(&c, &r) as f64;
    Scored::ok(Prf::new(l / c.len() as f64, l / r.len() as f64))
}

/// Sentence BLEU with uniform weights over orders 1..=max_n and the
/// standard brevity penalty. Any zero precision gives zero.
pub fn bleu(candidate: &str, reference: &str, max_n: usize) -> Scored<f64> {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    if c.is_empty() {
        return Scored { score: 0.0, flag: Some(ScoreFlag::EmptyCandidate) };
    }
    if max_n == 0 || c.len() < max_n {
        return Scored { score: 0.0, flag: Some(ScoreFlag::ShortText) };
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let matches = clipped_matches(&ngram_counts(&c, n), &ngram_counts(&r, n));
        if matches == 0 {
            return Scored::ok(0.0);
        }
        log_sum += (matches as f64 / (c.len() + 1 - n) as f64).ln();
    }
    let (cl, rl) = (c.len() as f64, r.len() as f64);
    let bp = if cl > rl { 1.0 } else { (1.0 - rl / cl).exp() };
    Scored::ok(bp * (log_sum / max_n as f64).exp())
}

/// Greedy max-cosine matching between two lists of unit vectors, with
/// negative similarities floored at zero.
pub fn bert_score(cand: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<Prf, MetricError> {
    let dim = cand.first().or(reference.first()).map_or(0, Vec::len);
    if let Some(v) = cand.iter().chain(reference).find(|v| v.len() != dim) {
        return Err(MetricError::Dimension { left: dim, right: v.len() });
    }
    if cand.is_empty() || reference.is_empty() {
        return Ok(Prf::default());
    }
    let sim = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(0.0, 1.0);
    let best_mean = |from: &[Vec<f64>], to: &[Vec<f64>]| {
        from.iter().map(|a| to.iter().map(|b| sim(a, b)).fold(0.0, f64::max)).sum::<f64>() / from.len() as f64
    };
    Ok(Prf::new(best_mean(cand, reference), best_mean(reference, cand)))
}

/// Maps a token sequence to one unit-norm vector per token.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &[String]) -> Vec<Vec<f64>>;
}

/// Deterministic pseudo-embeddings: each token gets a random direction seeded
/// by its hash, and a token's vector mixes in its neighbours' directions at
/// half weight so that context changes the embedding.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub dim: usize,
    pub window: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: 64, window: 1 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl HashingEmbedder {
    fn direction(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
        (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &[String]) -> Vec<Vec<f64>> {
        let dirs: Vec<Vec<f64>> = tokens.iter().map(|t| self.direction(t)).collect();
        (0..tokens.len())
            .map(|i| {
                let lo = i.saturating_sub(self.window);
                let hi = (i + self.window + 1).min(tokens.len());
                let mut v = vec![0.0; self.dim];
                for (j, d) in dirs.iter().enumerate().take(hi).skip(lo) {
                    let w = if j == i { 1.0 } else { 0.5 };
                    v.iter_mut().zip(d).for_each(|(a, b)| *a += w * b);
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub rouge1: Prf,
    pub rouge2: Prf,
    pub rouge_l: Prf,
    pub bleu: f64,
    pub bertscore: Option<Prf>,
    pub n_examples: usize,
}

fn mean_prf(items: &[Prf]) -> Prf {
    let n = items.len().max(1) as f64;
    Prf {
        precision: items.iter().map(|p| p.precision).sum::<f64>() / n,
        recall: items.iter().map(|p| p.recall).sum::<f64>() / n,
        f1: items.iter().map(|p| p.f1).sum::<f64>() / n,
    }
}

/// Per-example scores averaged over the corpus. BLEU uses orders 1..=4.
pub fn evaluate_corpus<S: AsRef<str>>(pairs: &[(S, S)], provider: Option<&dyn EmbeddingProvider>) -> ScoreReport {
    let mut r1 = Vec::with_capacity(pairs.len());
    let mut r2 = Vec::with_capacity(pairs.len());
    let mut rl = Vec::with_capacity(pairs.len());
    let mut bl = Vec::with_capacity(pairs.len());
    let mut bs = Vec::with_capacity(pairs.len());
    for (generated, reference) in pairs {
        let (g, r) = (generated.as_ref(), reference.as_ref());
        r1.push(rouge_n(g, r, 1).score);
        r2.push(rouge_n(g, r, 2).score);
        rl.push(rouge_l(g, r).score);
        bl.push(bleu(g, r, 4).score);
        if let Some(p) = provider {
            let (ge, re) = (p.embed(&tokenize(g)), p.embed(&tokenize(r)));
            bs.push(bert_score(&ge, &re).expect("one provider yields one dimension"));
        }
    }
    ScoreReport {
        rouge1: mean_prf(&r1),
        rouge2: mean_prf(&r2),
        rouge_l: mean_prf(&rl),
        bleu: bl.iter().sum::<f64>() / pairs.len().max(1) as f64,
        bertscore: provider.map(|_| mean_prf(&bs)),
        n_examples: pairs.len(),
    }
}

impl ScoreReport {
    /// Row label and value in display order.
    pub fn rows(&self) -> Vec<(&'static str, &'static str, f64)> {
        let mut rows = vec![
            ("rouge1_f1", "ROUGE-1 F1", self.rouge1.f1),
            ("rouge2_f1", "ROUGE-2 F1", self.rouge2.f1),
            ("rougeL_f1", "ROUGE-L F1", self.rouge_l.f1),
            ("bleu", "BLEU", self.bleu),
        ];
        if let Some(b) = self.bertscore {
            rows.push(("bertscore_precision", "BERTscore: precision", b.precision));
            rows.push(("bertscore_recall", "BERTscore: recall", b.recall));
            rows.push(("bertscore_f1", "BERTscore: F1", b.f1));
        }
        rows
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for (key, _, value) in self.rows() {
            map.insert(key.into(), json!(value));
        }
        map.insert("n_examples".into(), json!(self.n_examples));
        Value::Object(map)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22} {:>8}", "Metric", "Score");
        for (_, label, value) in self.rows() {
            let _ = writeln!(out, "{label:<22} {value:>8.4}");
        }
        let _ = writeln!(out, "{:<22} {:>8}", "examples", self.n_examples);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn near(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-9
    }

    #[test]
    fn tokenization() {
        assert_eq!(tokenize("Hello, World!  It's 2020."), vec!["hello", "world", "its", "2020"]);
        assert_eq!(tokenize("Привет, Мир"), vec!["привет", "мир"]);
        assert!(tokenize(" ... ").is_empty());
    }

    #[test]
    fn rouge_examples() {
        let s = rouge_n("a b c", "a b d", 1).score;
        assert!(near(s.precision, 2.0 / 3.0) && near(s.recall, 2.0 / 3.0) && near(s.f1, 2.0 / 3.0));
        let s = rouge_n("a b c d", "a b c e", 2).score;
        assert!(near(s.f1, 2.0 / 3.0));
        let s = rouge_l("a b c d", "a c b d").score;
        assert!(near(s.f1, 0.75));
        assert_eq!(rouge_n("x y z", "x y z", 3).score, Prf::new(1.0, 1.0));
        assert_eq!(rouge_l("a b", "c d").score.f1, 0.0);
        let short = rouge_n("a", "a b", 2);
        assert_eq!(short.flag, Some(ScoreFlag::ShortText));
        assert_eq!(short.score, Prf::default());
    }

    #[test]
    fn rouge_counts_are_clipped() {
        // "a a" vs "a": one match, precision 1/2
        let s = rouge_n("a a", "a", 1).score;
        assert!(near(s.precision, 0.5) && near(s.recall, 1.0));
    }

    #[test]
    fn bleu_examples() {
        assert!(near(bleu("the the the", "the cat", 1).score, 1.0 / 3.0));
        assert!(near(bleu("the cat", "the cat sat on mat", 1).score, (-1.5f64).exp()));
        assert!(near(bleu("a b c d e", "a b c d e", 4).score, 1.0));
        assert_eq!(bleu("", "a", 4).flag, Some(ScoreFlag::EmptyCandidate));
        assert_eq!(bleu("a b c", "x y z", 1).score, 0.0);
    }

    #[test]
    fn bert_score_examples() {
        let s = bert_score(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0]]).unwrap();
        assert!(near(s.recall, 1.0) && near(s.precision, 0.5) && near(s.f1, 2.0 / 3.0));
        let e = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        assert!(near(bert_score(&e, &e).unwrap().f1, 1.0));
        assert_eq!(bert_score(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]]).unwrap().f1, 0.0);
        assert_eq!(bert_score(&[vec![1.0, 0.0]], &[vec![-1.0, 0.0]]).unwrap().f1, 0.0);
        assert_eq!(
            bert_score(&[vec![1.0, 0.0]], &[vec![1.0, 0.0, 0.0]]),
            Err(MetricError::Dimension { left: 2, right: 3 })
        );
    }

    #[test]
    fn hashing_embedder_is_unit_and_contextual() {
        let e = HashingEmbedder::default();
        let toks = |s: &str| tokenize(s);
        let a = e.embed(&toks("the cat sat"));
        let b = e.embed(&toks("the dog sat"));
        assert_eq!(a.len(), 3);
        for v in a.iter().chain(&b) {
            assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
        assert_ne!(a[0], b[0]);
        assert_eq!(a, e.embed(&toks("the cat sat")));
    }

    #[test]
    fn corpus_means_and_report_shape() {
        let report = evaluate_corpus(&[("a b c", "a b c"), ("x y", "p q")], None);
        assert!(near(report.rouge1.f1, 0.5));
        assert_eq!(report.n_examples, 2);
        let keys: Vec<String> = report.to_json().as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 5);
        assert!(report.bertscore.is_none());

        let e = HashingEmbedder::default();
        let report = evaluate_corpus(&[("one two three four", "one two three four")], Some(&e));
        for (_, _, v) in report.rows() {
            assert!(near(v, 1.0), "{v}");
        }
        let json = report.to_json();
        for key in ["rouge1_f1", "rouge2_f1", "rougeL_f1", "bleu", "bertscore_precision", "bertscore_recall", "bertscore_f1", "n_examples"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let labels: Vec<&str> = report.rows().iter().map(|r| r.1).collect();
        assert_eq!(
            labels,
            ["ROUGE-1 F1", "ROUGE-2 F1", "ROUGE-L F1", "BLEU", "BERTscore: precision", "BERTscore: recall", "BERTscore: F1"]
        );
    }

    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        // every subsequence of a, checked against b
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            let mut it = b.iter();
            if sub.len() > best && sub.iter().all(|x| it.any(|y| y == x)) {
                best = sub.len();
            }
        }
        best
    }

    fn words() -> impl Strategy<Value = String> {
        proptest::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 1..10).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn lcs_matches_brute_force(a in proptest::collection::vec(0u8..4, 0..10), b in proptest::collection::vec(0u8..4, 0..10)) {
            prop_assert_eq!(lcs_len(&a, &b), brute_lcs(&a, &b));
        }

        #[test]
        fn scores_are_bounded_and_swap(a in words(), b in words(), n in 1usize..4) {
            let ab = rouge_n(&a, &b, n).score;
            let ba = rouge_n(&b, &a, n).score;
            prop_assert!(near(ab.precision, ba.recall));
            for v in [ab.precision, ab.recall, ab.f1, rouge_l(&a, &b).score.f1, bleu(&a, &b, n).score] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn bleu_clipping(a in words(), b in words()) {
            let c = tokenize(&a);
            let r = tokenize(&b);
            let unclipped = c.iter().filter(|t| r.contains(t)).count() as f64 / c.len() as f64;
            prop_assert!(bleu(&a, &b, 1).score <= unclipped + 1e-12);
            // Repeat a token already at or above its reference count. Below the
            // reference length the brevity penalty rewards any extra token,
            // so the comparison only holds once the candidate is long enough.
            let extra = c.iter().find(|t| c.iter().filter(|x| x == t).count() >= r.iter().filter(|x| x == t).count());
            if let Some(t) = extra {
                let longer = format!("{a} {t}");
                if c.len() >= r.len() {
                    prop_assert!(bleu(&longer, &b, 1).score <= bleu(&a, &b, 1).score + 1e-12);
                }
            }
        }

        #[test]
        fn bert_score_permutation_invariant(a in words(), b in words(), rot in 0usize..10) {
            let e = HashingEmbedder::default();
            let (x, y) = (e.embed(&tokenize(&a)), e.embed(&tokenize(&b)));
            let mut xr = x.clone();
            let k = rot % xr.len();
            xr.rotate_left(k);
            let mut yr = y.clone();
            yr.reverse();
            let s = bert_score(&x, &y).unwrap();
            let t = bert_score(&xr, &yr).unwrap();
            prop_assert!(near(s.f1, t.f1) && near(s.precision, t.precision) && near(s.recall, t.recall));
        }
    }
}
