//! Byte-level BPE with atomic special tokens.
//!
//! Ids are laid out densely: the four special tokens first, then the 256
//! byte symbols, then one id per merged token in the order merges were
//! learned. Text is pre-split into whitespace-led chunks and special-token
//! literals; merges never cross a chunk boundary.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub type TokenId = u32;

/// Reserved tokens. Their ids are fixed by declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Special {
    Pad,
    Bos,
    Sep,
    Eos,
}

impl Special {
    pub const ALL: [Special; 4] = [Special::Pad, Special::Bos, Special::Sep, Special::Eos];

    pub fn literal(self) -> &'static str {
        match self {
            Special::Pad => "<pad>",
            Special::Bos => "<s>",
            Special::Sep => "<|sep|>",
            Special::Eos => "</s>",
        }
    }

    pub fn id(self) -> TokenId {
        self as TokenId
    }

    /// Specials that `encode` recognises in running text. PAD is batching
    /// plumbing only, so a literal `<pad>` in input stays ordinary bytes.
    fn in_text() -> [Special; 3] {
        [Special::Bos, Special::Sep, Special::Eos]
    }
}

pub const NUM_SPECIAL: usize = Special::ALL.len();
pub const NUM_BYTES: usize = 256;
/// Specials plus byte symbols: the smallest possible vocabulary.
pub const BASE_VOCAB: usize = NUM_SPECIAL + NUM_BYTES;

const HEADER: &str = "bpe-v1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus is empty")]
    CorpusEmpty,
    #[error("target vocabulary size {target} is below the minimum {minimum}")]
    VocabTooSmall { target: usize, minimum: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownTokenId(TokenId),
    #[error("vocab file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Vec<u8>>,
    merges: Vec<(TokenId, TokenId)>,
    token_to_id: HashMap<Vec<u8>, TokenId>,
    merge_rank: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl Vocab {
    fn base() -> Self {
        let mut vocab = Vocab {
            tokens: Vec::with_capacity(BASE_VOCAB),
            merges: Vec::new(),
            token_to_id: HashMap::new(),
            merge_rank: HashMap::new(),
        };
        for special in Special::ALL {
            vocab.tokens.push(special.literal().as_bytes().to_vec());
        }
        for byte in 0..=255u8 {
            vocab.token_to_id.insert(vec![byte], vocab.tokens.len() as TokenId);
            vocab.tokens.push(vec![byte]);
        }
        vocab
    }

    /// Records a merge; returns true when it introduced a new token string.
    fn push_merge(&mut self, left: TokenId, right: TokenId) -> bool {
        let mut merged = self.tokens[left as usize].clone();
        merged.extend_from_slice(&self.tokens[right as usize]);
        let (id, fresh) = match self.token_to_id.get(&merged) {
            Some(&id) => (id, false),
            None => {
                let id = self.tokens.len() as TokenId;
                self.tokens.push(merged.clone());
                self.token_to_id.insert(merged, id);
                (id, true)
            }
        };
        self.merge_rank.insert((left, right), (self.merges.len(), id));
        self.merges.push((left, right));
        fresh
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<TokenId> {
        if let Some(special) = Special::ALL.iter().find(|s| s.literal().as_bytes() == bytes) {
            return Some(special.id());
        }
        self.token_to_id.get(bytes).copied()
    }

    pub fn special(&self, special: Special) -> TokenId {
        special.id()
    }

    pub fn pad(&self) -> TokenId {
        Special::Pad.id()
    }

    pub fn bos(&self) -> TokenId {
        Special::Bos.id()
    }

    pub fn sep(&self) -> TokenId {
        Special::Sep.id()
    }

    pub fn eos(&self) -> TokenId {
        Special::Eos.id()
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for piece in split_specials(text) {
            match piece {
                Piece::Special(s) => out.push(s.id()),
                Piece::Text(segment) => {
                    for chunk in chunks(segment) {
                        self.encode_chunk(chunk.as_bytes(), &mut out);
                    }
                }
            }
        }
        out
    }

    fn encode_chunk(&self, bytes: &[u8], out: &mut Vec<TokenId>) {
        let mut symbols: Vec<TokenId> = bytes.iter().map(|&b| byte_id(b)).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                .min();
            let Some((_, left, right, merged)) = best else { break };
            symbols = apply_merge(&symbols, left, right, merged);
        }
        out.extend_from_slice(&symbols);
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            if id == self.pad() {
                continue;
            }
            let bytes = self.token_bytes(id).ok_or(TokenizerError::UnknownTokenId(id))?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Concatenated token strings with PAD dropped. Byte sequences that are
    /// not valid UTF-8 (a generation cut mid-character) are replaced lossily.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER} {}\n", self.len());
        for special in Special::ALL {
            out.push_str(special.literal());
            out.push('\n');
        }
        for &(left, right) in &self.merges {
            let _ = writeln!(
                out,
                "{} {}",
                hex(&self.tokens[left as usize]),
                hex(&self.tokens[right as usize])
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let format = |line: usize, message: &str| TokenizerError::Format { line, message: message.to_string() };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| format(1, "missing header"))?;
        let declared: usize = header
            .strip_prefix(HEADER)
            .and_then(|rest| rest.strip_prefix(' '))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| format(1, "expected `bpe-v1 <size>`"))?;
        for special in Special::ALL {
            let (n, line) = lines.next().ok_or_else(|| format(0, "truncated special-token block"))?;
            if line != special.literal() {
                return Err(format(n, &format!("expected special token {}", special.literal())));
            }
        }
        let mut vocab = Vocab::base();
        for (n, line) in lines {
            let (left, right) = line.split_once(' ').ok_or_else(|| format(n, "expected two hex fields"))?;
            let left = unhex(left).ok_or_else(|| format(n, "bad hex"))?;
            let right = unhex(right).ok_or_else(|| format(n, "bad hex"))?;
            let left = vocab.token_to_id.get(&left).copied().ok_or_else(|| format(n, "unknown left symbol"))?;
            let right = vocab.token_to_id.get(&right).copied().ok_or_else(|| format(n, "unknown right symbol"))?;
            vocab.push_merge(left, right);
        }
        if vocab.len() != declared {
            return Err(format(1, &format!("header declares {declared} tokens, merges yield {}", vocab.len())));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Learns merges until the vocabulary holds `target_size` tokens or no
/// adjacent pair remains. The most frequent pair wins; ties go to the
/// lexicographically smallest (left bytes, right bytes).
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab, TokenizerError> {
    if target_size < BASE_VOCAB {
        return Err(TokenizerError::VocabTooSmall { target: target_size, minimum: BASE_VOCAB });
    }
    if corpus.iter().all(|t| t.as_ref().is_empty()) {
        return Err(TokenizerError::CorpusEmpty);
    }

    // Distinct chunks in first-seen order with their frequencies.
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut words: Vec<(Vec<TokenId>, u64)> = Vec::new();
    for text in corpus {
        for piece in split_specials(text.as_ref()) {
            let Piece::Text(segment) = piece else { continue };
            for chunk in chunks(segment) {
                let slot = *index.entry(chunk).or_insert_with(|| {
                    words.push((chunk.bytes().map(byte_id).collect(), 0));
                    words.len() - 1
                });
                words[slot].1 += 1;
            }
        }
    }

    let forbidden: Vec<&[u8]> = Special::ALL.iter().map(|s| s.literal().as_bytes()).collect();
    let mut vocab = Vocab::base();
    while vocab.len() < target_size {
        let mut counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        for (symbols, freq) in &words {
            for w in symbols.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += freq;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&((l, r), _)| {
                let (l, r) = (&vocab.tokens[l as usize], &vocab.tokens[r as usize]);
                !forbidden.iter().any(|f| f.len() == l.len() + r.len() && f.starts_with(l) && f.ends_with(r))
            })
            .max_by(|&((al, ar), ac), &((bl, br), bc)| {
                ac.cmp(&bc).then_with(|| {
                    let a = (&vocab.tokens[al as usize], &vocab.tokens[ar as usize]);
                    let b = (&vocab.tokens[bl as usize], &vocab.tokens[br as usize]);
                    b.cmp(&a)
                })
            });
        let Some(((left, right), _)) = best else { break };
        vocab.push_merge(left, right);
        let merged = vocab.merge_rank[&(left, right)].1;
        for (symbols, _) in &mut words {
            if symbols.len() > 1 {
                *symbols = apply_merge(symbols, left, right, merged);
            }
        }
    }
    Ok(vocab)
}

fn byte_id(b: u8) -> TokenId {
    (NUM_SPECIAL + b as usize) as TokenId
}

fn apply_merge(symbols: &[TokenId], left: TokenId, right: TokenId, merged: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(symbols[i]);
            i += 1;
        }
    }
    out
}

enum Piece<'a> {
    Special(Special),
    Text(&'a str),
}

fn split_specials(text: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let next = Special::in_text()
            .into_iter()
            .filter_map(|s| rest.find(s.literal()).map(|pos| (pos, s)))
            .min_by_key(|&(pos, _)| pos);
        match next {
            Some((pos, special)) => {
                if pos > 0 {
                    pieces.push(Piece::Text(&rest[..pos]));
                }
                pieces.push(Piece::Special(special));
                rest = &rest[pos + special.literal().len()..];
            }
            None => {
                pieces.push(Piece::Text(rest));
                break;
            }
        }
    }
    pieces
}

/// Splits before every whitespace character that follows a non-whitespace
/// one, so each chunk is `\s*\S*`.
fn chunks(segment: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    for (i, c) in segment.char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws {
            out.push(&segment[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < segment.len() {
        out.push(&segment[start..]);
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.is_empty() || s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}
