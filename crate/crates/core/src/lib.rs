//! Abstractive summarization toolkit: a byte-level BPE tokenizer, corpus
//! preparation, a small decoder-only transformer trained from scratch,
//! beam-search generation and ROUGE/BLEU/BERTScore evaluation.

pub mod cli;
pub mod data;
pub mod decoding;
pub mod lm;
pub mod metrics;
pub mod tokenizer;
