//! Seeded cipher language pairs.
//!
//! Language A is sampled from a bigram word model; language B is the image of
//! A under a word bijection (optionally followed by a local reorder rule).
//! A configurable fraction of the lexicon maps to itself (numeral-like
//! tokens shared by both languages, the way dates and names are).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{derive_seed, label_tag, rng, LabRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReorderRule {
    /// Swap the words at positions (2j, 2j+1); an involution.
    SwapPairs,
}

impl ReorderRule {
    pub fn apply<T: Clone>(&self, words: &[T]) -> Vec<T> {
        match self {
            ReorderRule::SwapPairs => words
                .chunks(2)
                .flat_map(|c| c.iter().rev().cloned().collect::<Vec<_>>())
                .collect(),
        }
    }

    pub fn invert<T: Clone>(&self, words: &[T]) -> Vec<T> {
        match self {
            ReorderRule::SwapPairs => self.apply(words),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub monolingual: usize,
    pub parallel: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPairSpec {
    pub vocab_size_per_lang: usize,
    pub cipher_seed: u64,
    pub reorder_rule: Option<ReorderRule>,
    pub sentence_length_range: (usize, usize),
    pub corpus_sizes: CorpusSizes,
    /// Fraction of the lexicon that is identical in both languages.
    pub shared_fraction: f64,
    pub lang_a: String,
    pub lang_b: String,
}

impl Default for SyntheticPairSpec {
    fn default() -> Self {
        Self {
            vocab_size_per_lang: 200,
            cipher_seed: 17,
            reorder_rule: None,
            sentence_length_range: (4, 10),
            corpus_sizes: CorpusSizes { monolingual: 20_000, parallel: 1_000, dev: 200, test: 200 },
            shared_fraction: 0.1,
            lang_a: "A".into(),
            lang_b: "B".into(),
        }
    }
}

/// Word lists of both languages; `a[i]` translates to `b[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cipher {
    pub a: Vec<String>,
    pub b: Vec<String>,
    pub reorder_rule: Option<ReorderRule>,
}

impl Cipher {
    pub fn encode(&self, sentence_a: &str) -> String {
        let map: BTreeMap<&str, &str> =
            self.a.iter().map(String::as_str).zip(self.b.iter().map(String::as_str)).collect();
        let words: Vec<&str> = sentence_a.split_whitespace().map(|w| map.get(w).copied().unwrap_or(w)).collect();
        let words = match self.reorder_rule {
            Some(r) => r.apply(&words),
            None => words,
        };
        words.join(" ")
    }

    pub fn decode(&self, sentence_b: &str) -> String {
        let map: BTreeMap<&str, &str> =
            self.b.iter().map(String::as_str).zip(self.a.iter().map(String::as_str)).collect();
        let words: Vec<&str> = sentence_b.split_whitespace().collect();
        let words = match self.reorder_rule {
            Some(r) => r.invert(&words),
            None => words,
        };
        words.iter().map(|w| map.get(w).copied().unwrap_or(w)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusBundle {
    pub lang_a: String,
    pub lang_b: String,
    pub mono_a: Vec<String>,
    pub mono_b: Vec<String>,
    pub train: Vec<(String, String)>,
    pub dev: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
}

fn side(pairs: &[(String, String)], first: bool) -> Vec<&str> {
    pairs.iter().map(|p| if first { p.0.as_str() } else { p.1.as_str() }).collect()
}

impl CorpusBundle {
    /// `(file name, lines)` for every split, in a fixed order.
    pub fn files(&self) -> Vec<(String, Vec<&str>)> {
        let (a, b) = (&self.lang_a, &self.lang_b);
        vec![
            (format!("mono.{a}.txt"), self.mono_a.iter().map(String::as_str).collect()),
            (format!("mono.{b}.txt"), self.mono_b.iter().map(String::as_str).collect()),
            (format!("train.{a}.txt"), side(&self.train, true)),
            (format!("train.{b}.txt"), side(&self.train, false)),
            (format!("dev.{a}.txt"), side(&self.dev, true)),
            (format!("dev.{b}.txt"), side(&self.dev, false)),
            (format!("test.{a}.txt"), side(&self.test, true)),
            (format!("test.{b}.txt"), side(&self.test, false)),
        ]
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, lines) in self.files() {
            let mut text = lines.join("\n");
            if !lines.is_empty() {
                text.push('\n');
            }
            fs::write(dir.join(name), text)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path, lang_a: &str, lang_b: &str) -> Result<Self> {
        let read = |name: String| -> Result<Vec<String>> {
            Ok(fs::read_to_string(dir.join(name))?.lines().map(str::to_owned).collect())
        };
        let pairs = |split: &str| -> Result<Vec<(String, String)>> {
            let xa = read(format!("{split}.{lang_a}.txt"))?;
            let xb = read(format!("{split}.{lang_b}.txt"))?;
            if xa.len() != xb.len() {
                return invalid(format!("{split} split is not parallel: {} vs {} lines", xa.len(), xb.len()));
            }
            Ok(xa.into_iter().zip(xb).collect())
        };
        Ok(Self {
            lang_a: lang_a.into(),
            lang_b: lang_b.into(),
            mono_a: read(format!("mono.{lang_a}.txt"))?,
            mono_b: read(format!("mono.{lang_b}.txt"))?,
            train: pairs("train")?,
            dev: pairs("dev")?,
            test: pairs("test")?,
        })
    }
}

const CONS_A: &[u8] = b"bdgklmnprst";
const CONS_B: &[u8] = b"cfhjqvwxz";
const VOWELS: &[u8] = b"aeiou";

fn make_word(r: &mut LabRng, consonants: &[u8]) -> String {
    let syllables = r.random_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(consonants[r.random_range(0..consonants.len())] as char);
        w.push(VOWELS[r.random_range(0..VOWELS.len())] as char);
    }
    if r.random_bool(0.3) {
        w.push(consonants[r.random_range(0..consonants.len())] as char);
    }
    w
}

fn make_lexicon(r: &mut LabRng, n: usize, consonants: &[u8], taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = make_word(r, consonants);
        if w.len() >= 2 && taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Recovers the seeded word bijection of `spec`.
pub fn cipher_from_spec(spec: &SyntheticPairSpec) -> Cipher {
    let n = spec.vocab_size_per_lang;
    let shared = ((spec.shared_fraction.clamp(0.0, 1.0) * n as f64) + 0.5).floor() as usize;
    let mut r = rng(derive_seed(spec.cipher_seed, &[label_tag("lexicon")]));
    let mut taken = HashSet::new();
    let own_a = make_lexicon(&mut r, n - shared, CONS_A, &mut taken);
    let mut own_b = make_lexicon(&mut r, n - shared, CONS_B, &mut taken);
    own_b.shuffle(&mut r);
    let mut numerals: Vec<String> = Vec::with_capacity(shared);
    while numerals.len() < shared {
        let w = r.random_range(10u32..10_000).to_string();
        if taken.insert(w.clone()) {
            numerals.push(w);
        }
    }
    let mut a = own_a;
    let mut b = own_b;
    a.extend(numerals.iter().cloned());
    b.extend(numerals);
    // interleave shared words into the frequency ranking
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let a = order.iter().map(|&i| a[i].clone()).collect();
    let b = order.iter().map(|&i| b[i].clone()).collect();
    Cipher { a, b, reorder_rule: spec.reorder_rule }
}

/// Zipfian unigram plus sparse successor sets, over word ranks.
struct BigramModel {
    unigram: Vec<f64>,
    successors: Vec<Vec<(usize, f64)>>,
}

impl BigramModel {
    const FANOUT: usize = 6;
    const FOLLOW: f64 = 0.75;

    fn new(n: usize, seed: u64) -> Self {
        let mut r = rng(derive_seed(seed, &[label_tag("bigram")]));
        let z: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
        let unigram: Vec<f64> = (1..=n).map(|k| 1.0 / (k as f64 * z)).collect();
        let successors = (0..n)
            .map(|_| {
                let mut succ: Vec<(usize, f64)> = (0..Self::FANOUT)
                    .map(|j| (sample_index(&mut r, &unigram), 1.0 / (j + 1) as f64))
                    .collect();
                let z: f64 = succ.iter().map(|s| s.1).sum();
                succ.iter_mut().for_each(|s| s.1 /= z);
                succ
            })
            .collect();
        Self { unigram, successors }
    }

    fn sentence(&self, r: &mut LabRng, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut prev = sample_index(r, &self.unigram);
        out.push(prev);
        while out.len() < len {
            prev = if r.random_bool(Self::FOLLOW) {
                let succ = &self.successors[prev];
                let weights: Vec<f64> = succ.iter().map(|s| s.1).collect();
                succ[sample_index(r, &weights)].0
            } else {
                sample_index(r, &self.unigram)
            };
            out.push(prev);
        }
        out
    }
}

fn sample_index(r: &mut LabRng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = r.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Generates every split of a cipher pair. Each sentence draws from its own
/// stream derived from `(seed, split, index, attempt)`, so the result does not
/// depend on how generation is sharded.
pub fn gen_synthetic_pair(spec: &SyntheticPairSpec) -> Result<CorpusBundle> {
    let (lo, hi) = spec.sentence_length_range;
    if lo == 0 || lo > hi {
        return invalid(format!("sentence length range ({lo}, {hi}) is empty or inverted"));
    }
    if spec.vocab_size_per_lang < 10 {
        return invalid("vocab_size_per_lang must be at least 10");
    }
    let s = spec.corpus_sizes;
    if s.monolingual == 0 || s.parallel == 0 || s.dev == 0 || s.test == 0 {
        return invalid("all corpus sizes must be positive");
    }
    if spec.lang_a == spec.lang_b {
        return invalid("the two languages need distinct tags");
    }
    let cipher = cipher_from_spec(spec);
    let model = BigramModel::new(spec.vocab_size_per_lang, spec.cipher_seed);

    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut draw = |split: &str, count: usize| -> Vec<String> {
        (0..count)
            .map(|i| {
                let mut attempt = 0u64;
                loop {
                    let mut r = rng(derive_seed(spec.cipher_seed, &[label_tag(split), i as u64, attempt]));
                    let len = r.random_range(lo..=hi);
                    let sent = model.sentence(&mut r, len);
                    if seen.insert(sent.clone()) {
                        let words: Vec<&str> = sent.iter().map(|&k| cipher.a[k].as_str()).collect();
                        return words.join(" ");
                    }
                    attempt += 1;
                }
            })
            .collect()
    };
    let pair = |a: Vec<String>| -> Vec<(String, String)> {
        a.into_iter().map(|x| {
            let y = cipher.encode(&x);
            (x, y)
        }).collect()
    };
    let test = draw("test", s.test);
    let dev = draw("dev", s.dev);
    let train = draw("train", s.parallel);
    let mono_a = draw("mono_a", s.monolingual);
    let mono_b_src = draw("mono_b", s.monolingual);
    Ok(CorpusBundle {
        lang_a: spec.lang_a.clone(),
        lang_b: spec.lang_b.clone(),
        mono_b: mono_b_src.iter().map(|x| cipher.encode(x)).collect(),
        mono_a,
        train: pair(train),
        dev: pair(dev),
        test: pair(test),
    })
}
