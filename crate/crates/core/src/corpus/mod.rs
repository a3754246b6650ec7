//! Vocabulary, tokenization and synthetic bilingual corpora.

mod synthetic;
mod tokenize;
mod vocab;

use std::collections::BTreeSet;

pub use synthetic::{
    cipher_from_spec, gen_synthetic_pair, Cipher, CorpusBundle, CorpusSizes, ReorderRule,
    SyntheticPairSpec,
};
pub use tokenize::TokenSeq;
pub use vocab::{surfaces, CorpusFile, Vocab, VocabEntry, BOS, EOS, MASK, PAD, UNK};

use crate::error::Result;

pub fn build_vocab(files: &[CorpusFile], size: usize) -> Result<Vocab> {
    Vocab::build_from_files(files, size)
}

pub fn tokenize(text: &str, vocab: &Vocab, lang: &str) -> TokenSeq {
    vocab.tokenize(text, lang)
}

pub fn detokenize(seq: &TokenSeq, vocab: &Vocab) -> Result<String> {
    vocab.detokenize(seq)
}

pub fn token_frequency_mask(vocab: &Vocab, lang: &str, threshold: f64) -> Result<BTreeSet<u32>> {
    vocab.frequency_mask(lang, threshold)
}

/// Tokenizes lines and drops any whose framed source (payload plus two
/// framing specials) would exceed `max_len`.
pub fn tokenize_corpus(lines: &[String], vocab: &Vocab, lang: &str, max_len: usize) -> Vec<TokenSeq> {
    lines
        .iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| vocab.tokenize(l, lang))
        .filter(|s| s.len() + 2 <= max_len)
        .collect()
}

/// Like [`tokenize_corpus`] for sentence pairs; a pair is dropped when either
/// side is over length.
pub fn tokenize_pairs(
    pairs: &[(String, String)],
    vocab: &Vocab,
    src_lang: &str,
    tgt_lang: &str,
    max_len: usize,
) -> Vec<(TokenSeq, TokenSeq)> {
    pairs
        .iter()
        .map(|(a, b)| (vocab.tokenize(a, src_lang), vocab.tokenize(b, tgt_lang)))
        .filter(|(a, b)| !a.is_empty() && !b.is_empty() && a.len() + 2 <= max_len && b.len() + 2 <= max_len)
        .collect()
}

/// Vocabulary sized to hold every word of a generated cipher pair.
pub fn vocab_for_bundle(bundle: &CorpusBundle) -> Result<Vocab> {
    let corpora = vec![
        (bundle.lang_a.clone(), bundle.mono_a.clone()),
        (bundle.lang_b.clone(), bundle.mono_b.clone()),
    ];
    let mut words = BTreeSet::new();
    let mut chars = BTreeSet::new();
    for (_, lines) in &corpora {
        for l in lines {
            for w in l.split_whitespace() {
                words.insert(w);
                chars.extend(w.chars());
            }
        }
    }
    Vocab::build(&corpora, 7 + words.len() + chars.len())
}
