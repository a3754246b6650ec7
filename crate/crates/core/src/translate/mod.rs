//! Translation finetuning, decoding, BLEU and the component ablation protocol.

mod ablate;
mod bleu;
mod decode;
mod finetune;

#[cfg(test)]
mod tests;

pub use ablate::{ablate, AblationSpec};
pub use bleu::{corpus_bleu, BleuReport};
pub use decode::{beam_one, decode, decode_batch, greedy_batch, max_output_len, DecodeMode, Hypothesis, LogitMask};
pub use finetune::{
    backtranslate, build_semi_corpus, dev_bleu, finetune_semi, finetune_supervised, finetune_unsupervised,
    nmt_config, random_init, transfer_parameters, translation_loss_graph, FinetuneEvent, FinetuneOutcome,
    FinetuneRecord, FinetuneSpec, Regime, ResumeState, SemiCorpus,
};
