//! Seedable whole-word corruption: masking, span masking, bounded local
//! shuffling, generator replacement and their composition.
//!
//! Every operation is a pure function of `(sequence, parameters, seed)`.
//! Framing specials (BOS, EOS, PAD, MASK, language ids) form their own word
//! groups and are never selected; UNK participates as part of a word.

mod record;

use std::ops::Range;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

pub use record::{CorruptionLabel, CorruptionRecord};

use crate::corpus::{TokenSeq, Vocab, MASK, UNK};
use crate::error::{invalid, Error, Result};
use crate::objectives::sampling::{sample_policy, SamplePolicy};
use crate::rng::{derive_seed, rng, LabRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMethod {
    TokenMask,
    SpanMask,
    Shuffle,
    Replace,
    /// Replacement followed by bounded shuffling.
    Compose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderNoiseMethod {
    Mask,
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderNoise {
    pub method: DecoderNoiseMethod,
    pub ratio: f64,
}

impl Default for DecoderNoise {
    fn default() -> Self {
        Self { method: DecoderNoiseMethod::Mask, ratio: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub method: NoiseMethod,
    /// Fraction of whole words masked or replaced.
    pub ratio: f64,
    /// Shuffle displacement bound in word positions.
    pub k: usize,
    /// Mean span length in words.
    pub span_mean: f64,
    /// Fraction of words that receive a random shuffle key.
    pub shuffle_ratio: f64,
    pub policy: SamplePolicy,
    pub decoder_noise: Option<DecoderNoise>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::mask(0.35)
    }
}

impl NoiseSpec {
    pub fn mask(ratio: f64) -> Self {
        Self {
            method: NoiseMethod::TokenMask,
            ratio,
            k: 0,
            span_mean: 3.5,
            shuffle_ratio: 1.0,
            policy: SamplePolicy::Standard,
            decoder_noise: None,
        }
    }

    pub fn span(ratio: f64) -> Self {
        Self { method: NoiseMethod::SpanMask, ..Self::mask(ratio) }
    }

    pub fn shuffle(k: usize) -> Self {
        Self { method: NoiseMethod::Shuffle, ratio: 0.0, k, ..Self::mask(0.0) }
    }

    pub fn replace(ratio: f64) -> Self {
        Self { method: NoiseMethod::Replace, ..Self::mask(ratio) }
    }

    pub fn replace_shuffle(ratio: f64, k: usize) -> Self {
        Self { method: NoiseMethod::Compose, k, ..Self::mask(ratio) }
    }

    pub fn uses_generator(&self) -> bool {
        matches!(self.method, NoiseMethod::Replace | NoiseMethod::Compose)
            || matches!(self.decoder_noise, Some(DecoderNoise { method: DecoderNoiseMethod::Replace, .. }))
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                invalid(format!("{name} {v} outside [0, 1]"))
            }
        };
        frac("ratio", self.ratio)?;
        frac("shuffle_ratio", self.shuffle_ratio)?;
        if self.method == NoiseMethod::SpanMask && !(self.span_mean > 0.0) {
            return invalid("span_mean must be positive for span masking");
        }
        if let Some(d) = self.decoder_noise {
            frac("decoder_noise.ratio", d.ratio)?;
        }
        if let SamplePolicy::Nucleus { p } = self.policy {
            if !(p > 0.0 && p <= 1.0) {
                return invalid(format!("nucleus mass {p} outside (0, 1]"));
            }
        }
        Ok(())
    }

    /// Short human label, e.g. `mask=35%` or `shuffle=5`.
    pub fn label(&self) -> String {
        let pct = (self.ratio * 100.0).round();
        match self.method {
            NoiseMethod::TokenMask => format!("mask={pct}%"),
            NoiseMethod::SpanMask => format!("mask={pct}% (span)"),
            NoiseMethod::Shuffle => format!("shuffle={}", self.k),
            NoiseMethod::Replace => format!("replace={pct}%"),
            NoiseMethod::Compose => format!("replace={pct}% + shuffle={}", self.k),
        }
    }
}

/// Supplies generator distributions for the masked positions of an input.
pub trait ReplacementSource {
    fn distributions(&mut self, masked: &TokenSeq, positions: &[usize]) -> Result<Vec<Vec<f64>>>;
}

impl<F> ReplacementSource for F
where
    F: FnMut(&TokenSeq, &[usize]) -> Result<Vec<Vec<f64>>>,
{
    fn distributions(&mut self, masked: &TokenSeq, positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        self(masked, positions)
    }
}

/// Uniform distribution over the whole vocabulary.
pub struct UniformSource(pub usize);

impl ReplacementSource for UniformSource {
    fn distributions(&mut self, _: &TokenSeq, positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![1.0 / self.0 as f64; self.0]; positions.len()])
    }
}

fn is_frame_special(vocab: &Vocab, id: u32) -> bool {
    vocab.is_special(id) && id != UNK
}

/// Word groups eligible for corruption.
fn candidate_words(seq: &TokenSeq, vocab: &Vocab) -> Vec<usize> {
    (0..seq.n_words())
        .filter(|&w| {
            let r = seq.word_range(w);
            !(r.len() == 1 && is_frame_special(vocab, seq.ids[r.start]))
        })
        .collect()
}

/// Maximal runs of consecutive candidate words (specials split runs).
fn candidate_runs(seq: &TokenSeq, vocab: &Vocab) -> Vec<Vec<usize>> {
    let mut runs: Vec<Vec<usize>> = Vec::new();
    let mut prev: Option<usize> = None;
    for w in candidate_words(seq, vocab) {
        match (prev, runs.last_mut()) {
            (Some(p), Some(run)) if p + 1 == w => run.push(w),
            _ => runs.push(vec![w]),
        }
        prev = Some(w);
    }
    runs
}

/// Round-half-up of `ratio × w`.
pub fn corruption_count(ratio: f64, w: usize) -> usize {
    ((ratio * w as f64) + 0.5).floor() as usize
}

fn select_with(seq: &TokenSeq, vocab: &Vocab, ratio: f64, r: &mut LabRng) -> Vec<usize> {
    let cands = candidate_words(seq, vocab);
    let n = corruption_count(ratio, cands.len()).min(cands.len());
    let mut chosen: Vec<usize> = index::sample(r, cands.len(), n).into_iter().map(|i| cands[i]).collect();
    chosen.sort_unstable();
    chosen
}

/// Chooses `round(ratio × W)` distinct non-special word groups uniformly.
pub fn select_words(seq: &TokenSeq, vocab: &Vocab, ratio: f64, seed: u64) -> Vec<usize> {
    select_with(seq, vocab, ratio, &mut rng(seed))
}

fn masked_from_words(seq: &TokenSeq, words: &[usize]) -> CorruptionRecord {
    let mut rec = CorruptionRecord::identity(seq);
    for &w in words {
        for i in seq.word_range(w) {
            rec.corrupted.ids[i] = MASK;
            rec.labels[i] = CorruptionLabel::Masked;
        }
    }
    rec
}

/// Whole-word masking: every unit of each selected word becomes MASK.
pub fn apply_token_mask(seq: &TokenSeq, vocab: &Vocab, ratio: f64, seed: u64) -> CorruptionRecord {
    masked_from_words(seq, &select_words(seq, vocab, ratio, seed))
}

/// mBART-style span masking; each span collapses to a single MASK.
pub fn apply_span_mask(seq: &TokenSeq, vocab: &Vocab, ratio: f64, span_mean: f64, seed: u64) -> CorruptionRecord {
    let mut r = rng(seed);
    let runs = candidate_runs(seq, vocab);
    let total: usize = runs.iter().map(Vec::len).sum();
    let target = corruption_count(ratio, total).min(total);
    if target == 0 {
        return CorruptionRecord::identity(seq);
    }
    // Flattened candidate list with run ids, so spans never cross a special.
    let flat: Vec<(usize, usize)> = runs
        .iter()
        .enumerate()
        .flat_map(|(ri, run)| run.iter().map(move |&w| (ri, w)))
        .collect();
    let mut span_of: Vec<Option<usize>> = vec![None; flat.len()];
    let poisson = Poisson::new(span_mean).expect("span_mean validated positive");
    let mut covered = 0;
    let mut n_spans = 0;
    while covered < target {
        let budget = target - covered;
        let len = (poisson.sample(&mut r) as usize).clamp(1, budget);
        let free: Vec<usize> = (0..flat.len()).filter(|&i| span_of[i].is_none()).collect();
        let start = free[r.random_range(0..free.len())];
        let mut i = start;
        let mut taken = 0;
        while taken < len && i < flat.len() && span_of[i].is_none() && flat[i].0 == flat[start].0 {
            span_of[i] = Some(n_spans);
            taken += 1;
            i += 1;
        }
        covered += taken;
        n_spans += 1;
    }
    let mut span_of_word: Vec<Option<usize>> = vec![None; seq.n_words()];
    for (i, &(_, w)) in flat.iter().enumerate() {
        span_of_word[w] = span_of[i];
    }

    let mut out = TokenSeq::empty(seq.lang.clone());
    let mut labels = Vec::new();
    let mut align: Vec<Range<usize>> = Vec::new();
    let mut w = 0;
    while w < seq.n_words() {
        match span_of_word[w] {
            Some(s) => {
                let start = seq.word_range(w).start;
                let mut end = seq.word_range(w).end;
                w += 1;
                while w < seq.n_words() && span_of_word[w] == Some(s) {
                    end = seq.word_range(w).end;
                    w += 1;
                }
                out.push_single(MASK);
                labels.push(CorruptionLabel::Masked);
                align.push(start..end);
            }
            None => {
                let range = seq.word_range(w);
                out.word_starts.push(out.ids.len());
                for i in range {
                    out.ids.push(seq.ids[i]);
                    labels.push(CorruptionLabel::Original);
                    align.push(i..i + 1);
                }
                w += 1;
            }
        }
    }
    CorruptionRecord { corrupted: out, labels, align, original: seq.clone() }
}

fn shuffle_with(seq: &TokenSeq, vocab: &Vocab, k: usize, ratio: f64, r: &mut LabRng) -> CorruptionRecord {
    let selected = select_with(seq, vocab, ratio, r);
    let mut new_order: Vec<usize> = (0..seq.n_words()).collect();
    for run in candidate_runs(seq, vocab) {
        let mut keyed: Vec<(f64, usize)> = run
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                let u = if k > 0 && selected.binary_search(&w).is_ok() {
                    r.random::<f64>() * (k + 1) as f64
                } else {
                    0.0
                };
                (j as f64 + u, w)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (slot, (_, w)) in run.iter().zip(keyed) {
            new_order[*slot] = w;
        }
    }
    let mut out = TokenSeq::empty(seq.lang.clone());
    let mut labels = Vec::with_capacity(seq.len());
    let mut align = Vec::with_capacity(seq.len());
    for (slot, &w) in new_order.iter().enumerate() {
        out.word_starts.push(out.ids.len());
        let label = if slot == w { CorruptionLabel::Original } else { CorruptionLabel::Misplaced };
        for i in seq.word_range(w) {
            out.ids.push(seq.ids[i]);
            labels.push(label);
            align.push(i..i + 1);
        }
    }
    CorruptionRecord { corrupted: out, labels, align, original: seq.clone() }
}

/// Bounded local shuffle of whole words: selected words get sort keys
/// `i + U[0, k+1)`, others `i`, giving displacement at most `k`.
pub fn apply_shuffle(seq: &TokenSeq, vocab: &Vocab, k: usize, ratio: f64, seed: u64) -> CorruptionRecord {
    shuffle_with(seq, vocab, k, ratio, &mut rng(seed))
}

/// Masked input for the generator and the unit positions it must fill.
pub fn mask_for_replacement(seq: &TokenSeq, vocab: &Vocab, ratio: f64, seed: u64) -> (TokenSeq, Vec<usize>) {
    let rec = apply_token_mask(seq, vocab, ratio, seed);
    let positions = rec.positions_with(CorruptionLabel::Masked);
    (rec.corrupted, positions)
}

/// Fills `positions` of `seq` with draws from `dists`. A draw equal to the
/// original token is labeled Original.
pub fn fill_replacements(
    seq: &TokenSeq,
    positions: &[usize],
    dists: &[Vec<f64>],
    policy: SamplePolicy,
    seed: u64,
) -> Result<CorruptionRecord> {
    if dists.len() != positions.len() {
        return Err(Error::LengthMismatch(format!(
            "{} distributions for {} masked positions",
            dists.len(),
            positions.len()
        )));
    }
    let mut r = rng(seed);
    let mut rec = CorruptionRecord::identity(seq);
    for (&pos, dist) in positions.iter().zip(dists) {
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Unnormalized { position: pos, sum });
        }
        let tok = sample_policy(dist, policy, &mut r)?;
        rec.corrupted.ids[pos] = tok;
        if tok != seq.ids[pos] {
            rec.labels[pos] = CorruptionLabel::Replaced;
        }
    }
    Ok(rec)
}

/// Whole-word replacement with generator samples.
pub fn apply_replace(
    seq: &TokenSeq,
    vocab: &Vocab,
    ratio: f64,
    source: &mut dyn ReplacementSource,
    policy: SamplePolicy,
    seed: u64,
) -> Result<CorruptionRecord> {
    let (masked, positions) = mask_for_replacement(seq, vocab, ratio, derive_seed(seed, &[0]));
    if positions.is_empty() {
        return Ok(CorruptionRecord::identity(seq));
    }
    let dists = source.distributions(&masked, &positions)?;
    fill_replacements(seq, &positions, &dists, policy, derive_seed(seed, &[1]))
}

/// Shuffles an already corrupted record; a moved replacement stays Replaced.
pub fn shuffle_record(rec: &CorruptionRecord, vocab: &Vocab, k: usize, ratio: f64, seed: u64) -> CorruptionRecord {
    let moved = apply_shuffle(&rec.corrupted, vocab, k, ratio, seed);
    let labels = moved
        .align
        .iter()
        .zip(&moved.labels)
        .map(|(src, &shuffle_label)| match rec.labels[src.start] {
            CorruptionLabel::Original => shuffle_label,
            earlier => earlier,
        })
        .collect();
    let align = moved.align.iter().map(|src| rec.align[src.start].clone()).collect();
    CorruptionRecord { corrupted: moved.corrupted, labels, align, original: rec.original.clone() }
}

/// Replacement first, then shuffling of the result.
#[allow(clippy::too_many_arguments)]
pub fn compose_replace_shuffle(
    seq: &TokenSeq,
    vocab: &Vocab,
    ratio: f64,
    k: usize,
    shuffle_ratio: f64,
    source: &mut dyn ReplacementSource,
    policy: SamplePolicy,
    seed: u64,
) -> Result<CorruptionRecord> {
    let replaced = apply_replace(seq, vocab, ratio, source, policy, derive_seed(seed, &[2]))?;
    Ok(shuffle_record(&replaced, vocab, k, shuffle_ratio, derive_seed(seed, &[3])))
}

/// Corrupts a decoder teacher-forcing input (`<lang> payload`); the
/// reconstruction target is left to the caller and stays clean.
pub fn apply_decoder_noise(
    decoder_input: &TokenSeq,
    vocab: &Vocab,
    noise: DecoderNoise,
    source: &mut dyn ReplacementSource,
    policy: SamplePolicy,
    seed: u64,
) -> Result<CorruptionRecord> {
    match noise.method {
        DecoderNoiseMethod::Mask => Ok(apply_token_mask(decoder_input, vocab, noise.ratio, seed)),
        DecoderNoiseMethod::Replace => apply_replace(decoder_input, vocab, noise.ratio, source, policy, seed),
    }
}

/// Applies `spec` to an encoder input. Generator-based methods draw from
/// `source`.
pub fn corrupt(
    seq: &TokenSeq,
    vocab: &Vocab,
    spec: &NoiseSpec,
    source: &mut dyn ReplacementSource,
    seed: u64,
) -> Result<CorruptionRecord> {
    Ok(match spec.method {
        NoiseMethod::TokenMask => apply_token_mask(seq, vocab, spec.ratio, seed),
        NoiseMethod::SpanMask => apply_span_mask(seq, vocab, spec.ratio, spec.span_mean, seed),
        NoiseMethod::Shuffle => apply_shuffle(seq, vocab, spec.k, spec.shuffle_ratio, seed),
        NoiseMethod::Replace => apply_replace(seq, vocab, spec.ratio, source, spec.policy, seed)?,
        NoiseMethod::Compose => {
            compose_replace_shuffle(seq, vocab, spec.ratio, spec.k, spec.shuffle_ratio, source, spec.policy, seed)?
        }
    })
}

/// Maximum whole-word displacement of a non-span record.
pub fn max_word_displacement(rec: &CorruptionRecord) -> usize {
    let mut orig_word = vec![0; rec.original.len()];
    for (w, r) in rec.original.words().enumerate() {
        for i in r {
            orig_word[i] = w;
        }
    }
    rec.corrupted
        .words()
        .enumerate()
        .map(|(w, r)| orig_word[rec.align[r.start].start].abs_diff(w))
        .max()
        .unwrap_or(0)
}
