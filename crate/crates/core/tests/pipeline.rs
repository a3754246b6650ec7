//! End-to-end runs of the public API on a small synthetic pair.

use std::collections::BTreeSet;

use seqlab::corpus::{gen_synthetic_pair, tokenize_corpus, tokenize_pairs, vocab_for_bundle, CorpusSizes, SyntheticPairSpec, TokenSeq, Vocab, EOS};
use seqlab::model::{Checkpoint, ModelConfig, Seq2Seq};
use seqlab::noise::NoiseSpec;
use seqlab::objectives::{pretrain, AdamConfig, PretrainSpec};
use seqlab::translate::{decode_batch, finetune_supervised, nmt_config, transfer_parameters, DecodeMode, FinetuneSpec};

struct Small {
    vocab: Vocab,
    mono: Vec<(String, Vec<TokenSeq>)>,
    pairs: Vec<(TokenSeq, TokenSeq)>,
}

fn small() -> Small {
    let spec = SyntheticPairSpec {
        vocab_size_per_lang: 30,
        sentence_length_range: (3, 6),
        corpus_sizes: CorpusSizes { monolingual: 300, parallel: 60, dev: 20, test: 20 },
        ..SyntheticPairSpec::default()
    };
    let b = gen_synthetic_pair(&spec).unwrap();
    let vocab = vocab_for_bundle(&b).unwrap();
    let mono = vec![
        ("A".to_string(), tokenize_corpus(&b.mono_a, &vocab, "A", 32)),
        ("B".to_string(), tokenize_corpus(&b.mono_b, &vocab, "B", 32)),
    ];
    let pairs = tokenize_pairs(&b.train, &vocab, "A", "B", 32);
    Small { vocab, mono, pairs }
}

fn pretrained(s: &Small, seed: u64) -> Seq2Seq {
    let mut m = Seq2Seq::new(ModelConfig::tiny(s.vocab.len()), seed).unwrap();
    let spec = PretrainSpec {
        steps: 20,
        batch_tokens: 200,
        adam: AdamConfig { base_lr: 1e-3, warmup: 5, ..AdamConfig::default() },
        ..PretrainSpec::default()
    };
    pretrain(&mut m, &s.vocab, &s.mono, &NoiseSpec::mask(0.35), &spec, seed, |_| Ok(())).unwrap();
    m
}

fn bits(m: &Seq2Seq) -> Vec<u64> {
    m.params.iter().flat_map(|(_, t)| t.value.data.iter().map(|x| x.to_bits())).collect()
}

#[test]
fn pretraining_is_reproducible() {
    let s = small();
    assert_eq!(bits(&pretrained(&s, 3)), bits(&pretrained(&s, 3)));
    assert_ne!(bits(&pretrained(&s, 3)), bits(&pretrained(&s, 4)));
}

#[test]
fn checkpoint_round_trip_keeps_outputs() {
    let s = small();
    let m = pretrained(&s, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::new(m.clone(), s.vocab.hash(), 20).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.step, 20);
    assert_eq!(back.vocab_hash, s.vocab.hash());
    let src = &s.mono[0].1[0];
    let a = m.forward_encoder(src, false).unwrap();
    let b = back.model.forward_encoder(src, false).unwrap();
    assert_eq!(a.final_layer().data, b.final_layer().data);
}

#[test]
fn transfer_rejects_a_foreign_vocabulary() {
    let s = small();
    let ck = Checkpoint::new(pretrained(&s, 1), s.vocab.hash(), 20);
    let down = nmt_config(&ck.model.config);
    assert!(transfer_parameters(&ck, &down, "not-the-hash").is_err());
    assert!(transfer_parameters(&ck, &down, &s.vocab.hash()).is_ok());
}

#[test]
fn finetuning_records_a_curve_from_step_zero() {
    let s = small();
    let ck = Checkpoint::new(pretrained(&s, 2), s.vocab.hash(), 20);
    let down = nmt_config(&ck.model.config);
    let mut m = transfer_parameters(&ck, &down, &s.vocab.hash()).unwrap();
    let fs = FinetuneSpec { steps: 10, eval_every: 5, batch_tokens: 200, ..FinetuneSpec::desk() };
    let dev = &s.pairs[..10];
    let out = finetune_supervised(&mut m, &s.vocab, &s.pairs[10..], dev, &fs, 2, |_| Ok(())).unwrap();
    let steps: Vec<u64> = out.curve.iter().map(|c| c.0).collect();
    assert_eq!(steps, vec![0, 5, 10]);
    assert_eq!(out.final_step, 10);
    assert!(out.curve.iter().all(|c| (0.0..=100.0).contains(&c.1)));
    assert!(out.curve.iter().any(|c| c.1 == out.best_bleu));
}

#[test]
fn restricted_decoding_only_emits_allowed_tokens() {
    let s = small();
    let m = pretrained(&s, 5);
    let allowed: BTreeSet<u32> = s.vocab.frequency_mask("B", 0.05).unwrap();
    let mut with_eos = allowed.clone();
    with_eos.insert(EOS);
    let sources: Vec<&TokenSeq> = s.pairs.iter().take(8).map(|p| &p.0).collect();
    for mode in [DecodeMode::Greedy, DecodeMode::Beam { width: 3 }] {
        for h in decode_batch(&m, &s.vocab, &sources, "B", mode, Some(&with_eos)).unwrap() {
            assert!(h.ids.iter().all(|id| allowed.contains(id) || *id == EOS), "{:?}", h.ids);
        }
    }
}
