use rand::Rng;
use serde::{Deserialize, Serialize};

use super::report::{BucketTally, ProbeReport};
use super::{payload_of, target_labels};
use crate::corpus::{TokenSeq, Vocab};
use crate::error::{invalid, Result};
use crate::model::{EncoderStates, Seq2Seq};
use crate::noise::CorruptionRecord;
use crate::rng::{derive_seed, rng};
use crate::tensor::{log_softmax, Matrix};

/// Shannon entropy (nats) of the softmax of `logits`.
pub fn entropy(logits: &[f64]) -> f64 {
    log_softmax(logits).iter().filter(|l| l.is_finite()).map(|&l| -l.exp() * l).sum()
}

/// Teacher-forced decoder logits for each record's original payload.
fn forced_logits(model: &Seq2Seq, vocab: &Vocab, rec: &CorruptionRecord, enc: &EncoderStates) -> Result<(Matrix, Vec<u32>)> {
    let (input, target) = vocab.frame_target(&payload_of(rec))?;
    Ok((model.forward_decoder(&input, enc)?, target.ids))
}

/// Mean decoder entropy per bucket of the reconstructed position.
pub fn decoder_entropy(
    model: &Seq2Seq,
    vocab: &Vocab,
    records: &[CorruptionRecord],
    seed: u64,
    model_id: &str,
) -> Result<ProbeReport> {
    let mut tally = BucketTally::default();
    for chunk in records.chunks(64) {
        let seqs: Vec<&TokenSeq> = chunk.iter().map(|r| &r.corrupted).collect();
        for (rec, enc) in chunk.iter().zip(model.encode_batch(&seqs, false)?) {
            let (logits, _) = forced_logits(model, vocab, rec, &enc)?;
            for (t, l) in target_labels(rec).into_iter().enumerate() {
                tally.add(l, entropy(logits.row(t)));
            }
        }
    }
    Ok(tally.finish("decoder_entropy", model_id, &model.config, seed, |v| v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    Zero,
    Mix,
}

impl BlockMode {
    fn name(self) -> &'static str {
        match self {
            BlockMode::Zero => "zero",
            BlockMode::Mix => "mix",
        }
    }
}

/// Which encoder positions are blocked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockScope {
    Corrupted,
    All,
}

fn nll_sum(logits: &Matrix, targets: &[u32]) -> f64 {
    targets.iter().enumerate().map(|(t, &id)| -log_softmax(logits.row(t))[id as usize]).sum()
}

/// Splits `n` items into runs of `size`, folding a trailing single item
/// into the previous run so that every run has at least two when n ≥ 2.
fn runs(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size.max(1)).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().unwrap().len() == 1 {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Reconstruction NLL with the final encoder states of blocked positions
/// zeroed or replaced by states of other sentences in the same batch.
///
/// Buckets hold the unblocked NLL per reconstructed position; scalars hold
/// mean per-token NLL for `unblocked` and each mode, plus `delta_<mode>`.
#[allow(clippy::too_many_arguments)]
pub fn block_sensitivity(
    model: &Seq2Seq,
    vocab: &Vocab,
    records: &[CorruptionRecord],
    modes: &[BlockMode],
    scope: BlockScope,
    batch: usize,
    seed: u64,
    model_id: &str,
) -> Result<ProbeReport> {
    if modes.contains(&BlockMode::Mix) && (batch < 2 || records.len() < 2) {
        return invalid("mixing needs at least two sentences per batch");
    }
    let mut tally = BucketTally::default();
    let mut sums = vec![0.0; modes.len() + 1];
    let mut tokens = 0usize;
    for (ci, range) in runs(records.len(), batch).into_iter().enumerate() {
        let chunk = &records[range];
        let seqs: Vec<&TokenSeq> = chunk.iter().map(|r| &r.corrupted).collect();
        let states: Vec<Matrix> = model.encode_batch(&seqs, false)?.into_iter().map(|s| s.layers.into_iter().last().unwrap()).collect();
        let mut r = rng(derive_seed(seed, &[ci as u64]));
        for (j, rec) in chunk.iter().enumerate() {
            let blocked: Vec<usize> = (0..rec.corrupted.len())
                .filter(|&i| scope == BlockScope::All || !rec.labels[i].is_original())
                .collect();
            let plain = EncoderStates { layers: vec![states[j].clone()] };
            let (logits, targets) = forced_logits(model, vocab, rec, &plain)?;
            sums[0] += nll_sum(&logits, &targets);
            tokens += targets.len();
            for (t, l) in target_labels(rec).into_iter().enumerate() {
                tally.add(l, -log_softmax(logits.row(t))[targets[t] as usize]);
            }
            for (mi, &mode) in modes.iter().enumerate() {
                let mut h = states[j].clone();
                for &i in &blocked {
                    match mode {
                        BlockMode::Zero => h.row_mut(i).iter_mut().for_each(|v| *v = 0.0),
                        BlockMode::Mix => {
                            let others: usize = states.iter().enumerate().filter(|&(k, _)| k != j).map(|(_, s)| s.rows).sum();
                            let mut pick = r.random_range(0..others);
                            let mut k = 0;
                            while k == j || pick >= states[k].rows {
                                if k != j {
                                    pick -= states[k].rows;
                                }
                                k += 1;
                            }
                            h.row_mut(i).copy_from_slice(states[k].row(pick));
                        }
                    }
                }
                let (logits, _) = forced_logits(model, vocab, rec, &EncoderStates { layers: vec![h] })?;
                sums[mi + 1] += nll_sum(&logits, &targets);
            }
        }
    }
    let mut report = tally.finish("block_sensitivity", model_id, &model.config, seed, |v| v);
    let n = tokens.max(1) as f64;
    report.scalars.insert("nll_unblocked".into(), sums[0] / n);
    for (mi, mode) in modes.iter().enumerate() {
        let nll = sums[mi + 1] / n;
        report.scalars.insert(format!("nll_{}", mode.name()), nll);
        report.scalars.insert(format!("delta_{}", mode.name()), nll - sums[0] / n);
    }
    Ok(report)
}
