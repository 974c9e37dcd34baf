//! Corpus generators shared by the integration tests.
#![allow(dead_code)]

use std::ffi::OsStr;
use std::path::Path;
use std::process::Command;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sumkit::data::ArticlePair;

const ARTICLE_WORDS: &[&str] = &[
    "river", "market", "council", "station", "harbor", "winter", "bridge", "school", "garden", "museum", "forest",
    "budget", "festival", "airport", "library", "stadium", "village", "factory", "hospital", "theater", "railway",
    "mountain", "highway", "orchestra", "election", "vaccine", "satellite", "harvest", "drought", "tunnel",
];

const SUMMARY_WORDS: &[&str] = &[
    "mayor", "opened", "record", "crowds", "delayed", "approved", "closed", "expanded", "funding", "protest",
    "repairs", "visitors", "ceremony", "warning", "shortage", "growth", "tickets", "rescue", "award", "plans",
];

/// 32 short pairs whose summaries use words absent from the articles and
/// never repeat a word, so no summary trigram occurs in its own prompt.
pub fn toy_pairs(n: usize, seed: u64) -> Vec<ArticlePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(8..14);
            let text: Vec<&str> = (0..len).map(|_| *ARTICLE_WORDS.choose(&mut rng).unwrap()).collect();
            let mut pool = SUMMARY_WORDS.to_vec();
            pool.shuffle(&mut rng);
            let summary = pool[..rng.random_range(4..7)].join(" ");
            ArticlePair::new(text.join(" "), summary)
        })
        .collect()
}

/// Pairs that pass the default cleaning filters: 20-word summaries with
/// about half their bigrams copied from the article. Every article starts
/// with a unique `docN` marker.
pub fn synthetic_pairs(n: usize, seed: u64) -> Vec<ArticlePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let body: Vec<&str> = (0..30).map(|_| *ARTICLE_WORDS.choose(&mut rng).unwrap()).collect();
            let text = format!("doc{i} {}", body.join(" "));
            let novel: Vec<&str> = (0..10).map(|_| *SUMMARY_WORDS.choose(&mut rng).unwrap()).collect();
            let summary = format!("{} {}", body[..10].join(" "), novel.join(" "));
            ArticlePair::new(text, summary)
        })
        .collect()
}

pub fn write_pairs(path: &Path, pairs: &[ArticlePair]) {
    sumkit::data::write_corpus(path, pairs).unwrap();
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn sumkit<S: AsRef<OsStr>>(args: &[S]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_sumkit")).args(args).output().expect("spawn sumkit");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

/// Runs and panics with the captured streams unless the exit code is 0.
pub fn sumkit_ok<S: AsRef<OsStr>>(args: &[S]) -> Run {
    let run = sumkit(args);
    assert_eq!(run.code, 0, "sumkit failed\nstdout: {}\nstderr: {}", run.stdout, run.stderr);
    run
}

pub fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub fn p(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}
