//! Analysis probes over frozen models: token prediction, decoder entropy,
//! encoder-output blocking, sentence retrieval and representation export.

mod decoder;
mod export;
mod report;
mod retrieval;
mod token;


use crate::corpus::{TokenSeq, Vocab};
use crate::error::Result;
use crate::model::Seq2Seq;
use crate::noise::{CorruptionLabel, CorruptionRecord, NoiseSpec};
use crate::objectives::prepare_batch;
use crate::rng::derive_seed;

pub use decoder::{block_sensitivity, decoder_entropy, entropy, BlockMode, BlockScope};
pub use export::export_representations;
pub use report::{config_hash, BucketStat, BucketTally, ProbeReport};
pub use retrieval::{pooled_layers, retrieval_accuracy, retrieve, sentence_retrieval};
pub use token::{eval_token_probe, probe_features, train_probe_on_features, train_token_probe, ProbeFeatures, TokenProbe, TokenProbeSpec};

/// Corrupts framed copies of `data` the way pretraining does, in
/// single-language chunks of 32.
pub fn corrupt_eval(
    model: &Seq2Seq,
    vocab: &Vocab,
    data: &[TokenSeq],
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Vec<CorruptionRecord>> {
    let mut out = Vec::with_capacity(data.len());
    let mut start = 0;
    let mut chunk = 0u64;
    while start < data.len() {
        let lang = &data[start].lang;
        let mut end = start + 1;
        while end < data.len() && end - start < 32 && data[end].lang == *lang {
            end += 1;
        }
        let refs: Vec<&TokenSeq> = data[start..end].iter().collect();
        out.extend(prepare_batch(model, vocab, &refs, noise, derive_seed(seed, &[chunk]))?.sources);
        chunk += 1;
        start = end;
    }
    Ok(out)
}

/// Payload of a framed record's original (framing specials dropped).
pub(crate) fn payload_of(rec: &CorruptionRecord) -> TokenSeq {
    let n = rec.original.len().saturating_sub(2);
    let mut p = TokenSeq::empty(rec.original.lang.clone());
    p.ids = rec.original.ids[..n].to_vec();
    p.word_starts = rec.original.word_starts.iter().copied().filter(|&s| s < n).collect();
    p
}

/// Label of each payload position of the original, as seen by the encoder.
pub(crate) fn target_labels(rec: &CorruptionRecord) -> Vec<CorruptionLabel> {
    let mut l = rec.original_labels();
    l.truncate(rec.original.len().saturating_sub(2));
    l
}
