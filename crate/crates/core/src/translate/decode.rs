use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, Vocab, EOS};
use crate::error::{invalid, Result};
use crate::model::{DecodeSession, HypState, Seq2Seq};
use crate::tensor::log_softmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam { width: usize },
}

impl DecodeMode {
    pub fn from_width(width: usize) -> Self {
        if width <= 1 {
            DecodeMode::Greedy
        } else {
            DecodeMode::Beam { width }
        }
    }
}

/// A finished output: payload ids (no EOS) and its length-normalized score.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    /// Sum of token log-probabilities (EOS included) divided by that count.
    pub score: f64,
    pub ended: bool,
}

/// Per-id additive logit mask: 0 for permitted ids, −∞ otherwise.
#[derive(Debug, Clone)]
pub struct LogitMask(Vec<f64>);

impl LogitMask {
    /// Every special except EOS is always forbidden; `allowed` further
    /// restricts the rest.
    pub fn new(vocab: &Vocab, allowed: Option<&BTreeSet<u32>>) -> Result<Self> {
        let mut m = vec![0.0; vocab.len()];
        for (id, slot) in m.iter_mut().enumerate() {
            let id = id as u32;
            let ok = (id == EOS || !vocab.is_special(id)) && allowed.is_none_or(|a| a.contains(&id));
            if !ok {
                *slot = f64::NEG_INFINITY;
            }
        }
        if m.iter().all(|v| v.is_infinite()) {
            return invalid("no token is allowed");
        }
        Ok(Self(m))
    }

    pub fn permits(&self, id: u32) -> bool {
        self.0[id as usize] == 0.0
    }

    fn log_probs(&self, logits: &[f64]) -> Vec<f64> {
        let masked: Vec<f64> = logits.iter().zip(&self.0).map(|(l, m)| l + m).collect();
        log_softmax(&masked)
    }
}

/// Output length bound: twice the source payload plus eight, capped so the
/// output can itself be framed as a source.
pub fn max_output_len(model: &Seq2Seq, src_payload_len: usize) -> usize {
    (2 * src_payload_len + 8).min(model.config.max_len.saturating_sub(2)).max(1)
}

fn best_token(lp: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding of many sources at once.
pub fn greedy_batch(
    model: &Seq2Seq,
    vocab: &Vocab,
    sources: &[&TokenSeq],
    tgt_lang: &str,
    mask: &LogitMask,
) -> Result<Vec<Hypothesis>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let framed: Vec<TokenSeq> = sources.iter().map(|s| vocab.frame_source(s)).collect::<Result<_>>()?;
    let session = DecodeSession::new(model, &framed.iter().collect::<Vec<_>>())?;
    let lang = vocab.lang_id(tgt_lang)?;
    let limits: Vec<usize> = sources.iter().map(|s| max_output_len(model, s.len())).collect();
    let mut out: Vec<Hypothesis> = (0..sources.len()).map(|_| Hypothesis { ids: vec![], score: 0.0, ended: false }).collect();
    let mut live: Vec<usize> = (0..sources.len()).collect();
    let mut states: Vec<HypState> = live.iter().map(|&i| session.start(i)).collect();
    let mut feed: Vec<u32> = vec![lang; live.len()];
    let mut sums = vec![0.0; sources.len()];
    let mut counts = vec![0usize; sources.len()];
    while !live.is_empty() {
        let logits = session.step(&mut states, &feed)?;
        let mut keep = Vec::with_capacity(live.len());
        for (r, &i) in live.iter().enumerate() {
            let lp = mask.log_probs(logits.row(r));
            let tok = best_token(&lp);
            sums[i] += lp[tok as usize];
            counts[i] += 1;
            if tok == EOS {
                out[i].ended = true;
            } else {
                out[i].ids.push(tok);
                if counts[i] < limits[i] {
                    keep.push(r);
                }
            }
        }
        live = keep.iter().map(|&r| live[r]).collect();
        states = keep.iter().map(|&r| states[r].clone()).collect();
        feed = live.iter().map(|&i| *out[i].ids.last().unwrap()).collect();
    }
    for (i, h) in out.iter_mut().enumerate() {
        h.score = sums[i] / counts[i].max(1) as f64;
    }
    Ok(out)
}

struct Beam {
    state: HypState,
    ids: Vec<u32>,
    logp: f64,
}

fn cmp_hyp(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids))
}

/// Length-normalized beam search for one source. The greedy hypothesis
/// seeds the finished pool, so the result never scores below it.
pub fn beam_one(
    model: &Seq2Seq,
    vocab: &Vocab,
    source: &TokenSeq,
    tgt_lang: &str,
    width: usize,
    mask: &LogitMask,
) -> Result<Hypothesis> {
    if width == 0 {
        return invalid("beam width must be at least 1");
    }
    let greedy = greedy_batch(model, vocab, &[source], tgt_lang, mask)?.remove(0);
    let framed = vocab.frame_source(source)?;
    let session = DecodeSession::new(model, &[&framed])?;
    let limit = max_output_len(model, source.len());
    let mut finished = vec![greedy];
    let mut n_finished = 0;
    let mut beams = vec![Beam { state: session.start(0), ids: vec![], logp: 0.0 }];
    let lang = vocab.lang_id(tgt_lang)?;
    let mut step = 0;
    while !beams.is_empty() && n_finished < width {
        let mut states: Vec<HypState> = beams.iter().map(|b| b.state.clone()).collect();
        let feed: Vec<u32> = beams.iter().map(|b| b.ids.last().copied().unwrap_or(lang)).collect();
        let logits = session.step(&mut states, &feed)?;
        step += 1;
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            let lp = mask.log_probs(logits.row(bi));
            for (tok, &v) in lp.iter().enumerate() {
                if v.is_finite() {
                    cands.push((b.logp + v, bi, tok as u32));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(width);
        for (logp, bi, tok) in cands.into_iter().take(2 * width) {
            if next.len() == width {
                break;
            }
            let mut ids = beams[bi].ids.clone();
            if tok == EOS {
                finished.push(Hypothesis { ids, score: logp / step as f64, ended: true });
                n_finished += 1;
                continue;
            }
            ids.push(tok);
            if step >= limit {
                finished.push(Hypothesis { ids, score: logp / step as f64, ended: false });
                n_finished += 1;
                continue;
            }
            next.push(Beam { state: states[bi].clone(), ids, logp });
        }
        beams = next;
    }
    finished.sort_by(cmp_hyp);
    Ok(finished.remove(0))
}

/// Translates each source payload into `tgt_lang`. `allowed`, when given,
/// restricts output tokens (EOS must be included to allow stopping).
pub fn decode_batch(
    model: &Seq2Seq,
    vocab: &Vocab,
    sources: &[&TokenSeq],
    tgt_lang: &str,
    mode: DecodeMode,
    allowed: Option<&BTreeSet<u32>>,
) -> Result<Vec<Hypothesis>> {
    let mask = LogitMask::new(vocab, allowed)?;
    match mode {
        DecodeMode::Greedy => {
            let mut out = Vec::with_capacity(sources.len());
            for chunk in sources.chunks(64) {
                out.extend(greedy_batch(model, vocab, chunk, tgt_lang, &mask)?);
            }
            Ok(out)
        }
        DecodeMode::Beam { width } => {
            sources.iter().map(|s| beam_one(model, vocab, s, tgt_lang, width, &mask)).collect()
        }
    }
}

pub fn decode(
    model: &Seq2Seq,
    vocab: &Vocab,
    source: &TokenSeq,
    tgt_lang: &str,
    mode: DecodeMode,
    allowed: Option<&BTreeSet<u32>>,
) -> Result<TokenSeq> {
    let h = decode_batch(model, vocab, &[source], tgt_lang, mode, allowed)?.remove(0);
    vocab.seq_from_ids(&h.ids, tgt_lang)
}
