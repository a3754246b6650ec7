use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::autograd::Graph;
use crate::corpus::{
    gen_synthetic_pair, tokenize_corpus, tokenize_pairs, vocab_for_bundle, CorpusSizes, SyntheticPairSpec, TokenSeq,
    Vocab, EOS,
};
use crate::model::{Checkpoint, Component, ModelConfig, Seq2Seq};
use crate::tensor::log_softmax;

struct Fixture {
    vocab: Vocab,
    mono_a: Vec<TokenSeq>,
    mono_b: Vec<TokenSeq>,
    train: Vec<(TokenSeq, TokenSeq)>,
    dev: Vec<(TokenSeq, TokenSeq)>,
}

fn fixture() -> Fixture {
    let spec = SyntheticPairSpec {
        vocab_size_per_lang: 30,
        corpus_sizes: CorpusSizes { monolingual: 300, parallel: 300, dev: 20, test: 10 },
        sentence_length_range: (3, 6),
        ..Default::default()
    };
    let bundle = gen_synthetic_pair(&spec).unwrap();
    let vocab = vocab_for_bundle(&bundle).unwrap();
    Fixture {
        mono_a: tokenize_corpus(&bundle.mono_a, &vocab, "A", 32),
        mono_b: tokenize_corpus(&bundle.mono_b, &vocab, "B", 32),
        train: tokenize_pairs(&bundle.train, &vocab, "A", "B", 32),
        dev: tokenize_pairs(&bundle.dev, &vocab, "A", "B", 32),
        vocab,
    }
}

fn tiny(vocab: &Vocab) -> ModelConfig {
    ModelConfig::tiny(vocab.len())
}

fn quick_spec(steps: u64) -> FinetuneSpec {
    FinetuneSpec {
        lr: 3e-3,
        warmup: 20,
        steps,
        dropout: 0.0,
        batch_tokens: 200,
        eval_every: 0,
        eval_beam: 1,
        ..FinetuneSpec::default()
    }
}

fn no_events(_: FinetuneEvent<'_>) -> crate::Result<()> {
    Ok(())
}

fn ngrams(words: &[&str], n: usize) -> Vec<Vec<String>> {
    (0..words.len().saturating_sub(n - 1)).map(|i| words[i..i + n].iter().map(|w| w.to_string()).collect()).collect()
}

/// Straightforward BLEU: n-grams compared by list search, no maps.
fn oracle_bleu(hyps: &[&str], refs: &[&str]) -> f64 {
    let mut m = [0f64; 4];
    let mut t = [0f64; 4];
    let (mut c, mut r) = (0f64, 0f64);
    for (h, rf) in hyps.iter().zip(refs) {
        let hw: Vec<&str> = h.split_whitespace().collect();
        let rw: Vec<&str> = rf.split_whitespace().collect();
        c += hw.len() as f64;
        r += rw.len() as f64;
        for n in 1..=4 {
            let hg = ngrams(&hw, n);
            let mut pool = ngrams(&rw, n);
            t[n - 1] += hg.len() as f64;
            for g in hg {
                if let Some(k) = pool.iter().position(|x| *x == g) {
                    pool.remove(k);
                    m[n - 1] += 1.0;
                }
            }
        }
    }
    if m[0] == 0.0 {
        return 0.0;
    }
    let mut logs = 0.0;
    for n in 0..4 {
        let p = if n > 0 && m[n] == 0.0 { 1.0 / (t[n] + 1.0) } else { m[n] / t[n] };
        logs += p.ln() / 4.0;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * logs.exp()
}

const FIXTURE_REFS: [&str; 20] = [
    "the cat sat on the mat",
    "a quick brown fox jumps over the lazy dog",
    "there is a book on the table",
    "she sells sea shells by the sea shore",
    "we went to the market yesterday",
    "it is raining again today",
    "my brother likes green apples",
    "the train leaves at noon",
    "please close the door behind you",
    "birds fly south in winter",
    "he reads the paper every morning",
    "the children play in the park",
    "water boils at one hundred degrees",
    "they built a house near the river",
    "the old man walked slowly home",
    "music fills the empty hall",
    "a cold wind blew from the north",
    "the store opens at nine",
    "our team won the final match",
    "the moon rises over the hills",
];

const FIXTURE_HYPS: [&str; 20] = [
    "the cat sat on a mat",
    "a fast brown fox jumps over the lazy dog",
    "there is book on table",
    "she sells shells by the sea shore",
    "we went to market",
    "it is raining today again",
    "my brother likes red apples very much",
    "the train leaves at noon",
    "close the door please",
    "birds fly north in winter",
    "he reads a paper each morning",
    "children play in the park",
    "water boils at one hundred degrees",
    "they built a house by the river",
    "the old man walked home slowly",
    "music fills the hall",
    "cold wind blew from north",
    "store opens at nine",
    "our team lost the final match",
    "moon",
];

#[test]
fn bleu_matches_brute_force_oracle() {
    let got = corpus_bleu(&FIXTURE_HYPS, &FIXTURE_REFS).unwrap();
    let want = oracle_bleu(&FIXTURE_HYPS, &FIXTURE_REFS);
    assert!((got.bleu - want).abs() < 0.01, "{} vs {want}", got.bleu);
    assert!(got.bleu > 10.0 && got.bleu < 90.0);
    let short = ["the cat", "a"];
    let refs = ["the cat sat", "b c d e"];
    let got = corpus_bleu(&short, &refs).unwrap();
    assert!((got.bleu - oracle_bleu(&short, &refs)).abs() < 0.01);
}

#[test]
fn bleu_closed_cases() {
    let r = corpus_bleu(&FIXTURE_REFS, &FIXTURE_REFS).unwrap();
    assert!((r.bleu - 100.0).abs() < 1e-9);
    assert_eq!(r.brevity_penalty, 1.0);
    assert_eq!(r.hyp_len, r.ref_len);
    assert_eq!(corpus_bleu(&["x y z"], &["a b c"]).unwrap().bleu, 0.0);
    assert_eq!(corpus_bleu(&[""], &["a b c"]).unwrap().bleu, 0.0);
    assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
    assert!(corpus_bleu::<&str, &str>(&[], &[]).is_err());
    let json = serde_json::to_value(&r).unwrap();
    for k in ["bleu", "ngram_precisions", "brevity_penalty", "hyp_len", "ref_len"] {
        assert!(json.get(k).is_some(), "{k}");
    }
}

proptest! {
    #[test]
    fn bleu_is_order_invariant(perm in Just((0..20usize).collect::<Vec<_>>()).prop_shuffle()) {
        let h: Vec<&str> = perm.iter().map(|&i| FIXTURE_HYPS[i]).collect();
        let r: Vec<&str> = perm.iter().map(|&i| FIXTURE_REFS[i]).collect();
        let a = corpus_bleu(&h, &r).unwrap().bleu;
        let b = corpus_bleu(&FIXTURE_HYPS, &FIXTURE_REFS).unwrap().bleu;
        prop_assert!((a - b).abs() < 1e-9);
    }
}

/// Mean token log-probability of `ids + EOS` by teacher forcing.
fn forced_score(model: &Seq2Seq, vocab: &Vocab, src: &TokenSeq, ids: &[u32], mask: &LogitMask) -> f64 {
    let enc = model.forward_encoder(&vocab.frame_source(src).unwrap(), false).unwrap();
    let mut prefix = vec![vocab.lang_id("B").unwrap()];
    prefix.extend_from_slice(ids);
    let logits = model.forward_decoder(&vocab.seq_from_ids(&prefix, "B").unwrap(), &enc).unwrap();
    let mut targets = ids.to_vec();
    targets.push(EOS);
    let mut sum = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row: Vec<f64> =
            logits.row(r).iter().enumerate().map(|(i, v)| if mask.permits(i as u32) { *v } else { f64::NEG_INFINITY }).collect();
        sum += log_softmax(&row)[t as usize];
    }
    sum / targets.len() as f64
}

fn trained(fx: &Fixture, steps: u64) -> Seq2Seq {
    let mut m = random_init(&tiny(&fx.vocab), 1).unwrap();
    finetune_supervised(&mut m, &fx.vocab, &fx.train, &fx.dev, &quick_spec(steps), 2, no_events).unwrap();
    m
}

#[test]
fn beam_one_equals_greedy_and_wider_beam_scores_no_worse() {
    let fx = fixture();
    let model = trained(&fx, 60);
    let srcs: Vec<&TokenSeq> = fx.mono_a.iter().take(100).collect();
    let g = decode_batch(&model, &fx.vocab, &srcs, "B", DecodeMode::Greedy, None).unwrap();
    let b1 = decode_batch(&model, &fx.vocab, &srcs, "B", DecodeMode::Beam { width: 1 }, None).unwrap();
    for (x, y) in g.iter().zip(&b1) {
        assert_eq!(x.ids, y.ids);
    }
    let b5 = decode_batch(&model, &fx.vocab, &srcs[..30], "B", DecodeMode::Beam { width: 5 }, None).unwrap();
    let mask = LogitMask::new(&fx.vocab, None).unwrap();
    for ((src, x), y) in srcs.iter().zip(&g).zip(&b5) {
        assert!(y.score >= x.score - 1e-12);
        if x.ended {
            assert!((x.score - forced_score(&model, &fx.vocab, src, &x.ids, &mask)).abs() < 1e-9);
        }
        if y.ended {
            assert!((y.score - forced_score(&model, &fx.vocab, src, &y.ids, &mask)).abs() < 1e-9);
        }
    }
}

#[test]
fn decode_respects_allowed_set_and_length() {
    let fx = fixture();
    let model = random_init(&tiny(&fx.vocab), 4).unwrap();
    let specials: BTreeSet<u32> = fx.vocab.special_ids().collect();
    for mode in [DecodeMode::Greedy, DecodeMode::Beam { width: 3 }] {
        let out = decode(&model, &fx.vocab, &fx.mono_a[0], "B", mode, Some(&specials)).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.lang, "B");
    }
    let only_pad: BTreeSet<u32> = [0].into();
    assert!(decode(&model, &fx.vocab, &fx.mono_a[0], "B", DecodeMode::Greedy, Some(&only_pad)).is_err());
    let allowed = fx.vocab.frequency_mask("B", 0.02).unwrap();
    let srcs: Vec<&TokenSeq> = fx.mono_a.iter().take(20).collect();
    for mode in [DecodeMode::Greedy, DecodeMode::Beam { width: 2 }] {
        let a = decode_batch(&model, &fx.vocab, &srcs, "B", mode, Some(&allowed)).unwrap();
        let b = decode_batch(&model, &fx.vocab, &srcs, "B", mode, Some(&allowed)).unwrap();
        assert_eq!(a, b);
        for (s, h) in srcs.iter().zip(&a) {
            assert!(h.ids.iter().all(|id| allowed.contains(id) && !fx.vocab.is_special(*id)));
            assert!(h.ids.len() + usize::from(h.ended) <= 2 * s.len() + 8);
        }
    }
}

#[test]
fn unsmoothed_loss_is_exact_nll() {
    let fx = fixture();
    let model = random_init(&tiny(&fx.vocab), 6).unwrap();
    let pairs: Vec<(&TokenSeq, &TokenSeq)> = fx.train.iter().take(4).map(|(a, b)| (a, b)).collect();
    let mut g = Graph::inference();
    let loss = translation_loss_graph(&model, &mut g, &fx.vocab, &pairs, 0.0).unwrap();
    let (mut sum, mut n) = (0.0, 0);
    for (s, t) in &pairs {
        let enc = model.forward_encoder(&fx.vocab.frame_source(s).unwrap(), false).unwrap();
        let (input, target) = fx.vocab.frame_target(t).unwrap();
        let logits = model.forward_decoder(&input, &enc).unwrap();
        for (r, &id) in target.ids.iter().enumerate() {
            sum -= log_softmax(logits.row(r))[id as usize];
            n += 1;
        }
    }
    assert!((g.scalar(loss) - sum / n as f64).abs() < 1e-6);
    let mut g = Graph::inference();
    let smoothed = translation_loss_graph(&model, &mut g, &fx.vocab, &pairs, 0.1).unwrap();
    assert!((g.scalar(smoothed) - sum / n as f64).abs() > 1e-6);
}

fn pretrained(vocab: &Vocab) -> Checkpoint {
    let cfg = ModelConfig { generator_enabled: true, rtd_enabled: true, emlm_enabled: true, ..tiny(vocab) };
    Checkpoint::new(Seq2Seq::new(cfg, 9).unwrap(), vocab.hash(), 100)
}

#[test]
fn transfer_drops_heads_and_keeps_tensors() {
    let fx = fixture();
    let ck = pretrained(&fx.vocab);
    let m = transfer_parameters(&ck, &ModelConfig { dropout: 0.3, ..tiny(&fx.vocab) }, &fx.vocab.hash()).unwrap();
    let bits = |s: &Seq2Seq| s.params.value(s.embed_id()).data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&m), bits(&ck.model));
    let tags = ck.model.tag_components().unwrap();
    let kept: usize = [Component::Embedding, Component::EncoderLayers, Component::DecoderLayers, Component::CrossAttention]
        .iter()
        .flat_map(|c| &tags[c])
        .map(|n| ck.model.params.value(ck.model.params.require(n).unwrap()).len())
        .sum();
    assert_eq!(m.params.n_params(), kept);
    assert!(!m.config.generator_enabled && !m.config.rtd_enabled && !m.config.emlm_enabled);
    assert!(transfer_parameters(&ck, &tiny(&fx.vocab), "other").is_err());
    match transfer_parameters(&ck, &ModelConfig { d_ff: 64, layers_dec: 1, ..tiny(&fx.vocab) }, &fx.vocab.hash()) {
        Err(crate::Error::ConfigMismatch(f)) => assert_eq!(f, vec!["d_ff".to_string(), "layers_dec".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn supervised_training_improves_dev_bleu() {
    let fx = fixture();
    let mut m = random_init(&tiny(&fx.vocab), 1).unwrap();
    let mut records = Vec::new();
    let spec = FinetuneSpec { eval_every: 100, ..quick_spec(400) };
    let out = finetune_supervised(&mut m, &fx.vocab, &fx.train, &fx.dev, &spec, 2, |e| {
        if let FinetuneEvent::Metrics(r) = e {
            records.push(r.clone());
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(out.curve.len(), 5);
    assert!(out.best_bleu > out.curve[0].1 + 5.0, "{:?}", out.curve);
    assert_eq!(dev_bleu(&Seq2Seq::from_params(m.config.clone(), out.best_params.clone()).unwrap(), &fx.vocab, &fx.dev, 1).unwrap(), out.best_bleu);
    assert!(records.iter().any(|r| r.dev_bleu.is_some()) && records.iter().any(|r| r.loss.is_some()));
    assert!(finetune_supervised(&mut m, &fx.vocab, &[], &fx.dev, &spec, 2, no_events).is_err());
}

#[test]
fn backtranslation_pairs_every_sentence() {
    let fx = fixture();
    let model = random_init(&tiny(&fx.vocab), 3).unwrap();
    let mono: Vec<TokenSeq> = fx.mono_b.iter().take(25).cloned().collect();
    let out = backtranslate(&model, &fx.vocab, &mono, "A").unwrap();
    assert_eq!(out.len(), mono.len());
    let lang = fx.vocab.lang_id("A").unwrap();
    for ((syn, orig), m) in out.iter().zip(&mono) {
        assert_eq!(orig, m);
        assert_eq!(syn.lang, "A");
        assert_eq!(*fx.vocab.frame_source(syn).unwrap().ids.last().unwrap(), lang);
    }
}

#[test]
fn copy_task_backtranslates_to_itself() {
    let fx = fixture();
    let pairs: Vec<(TokenSeq, TokenSeq)> = fx.mono_a.iter().map(|s| (s.clone(), s.clone())).collect();
    let cfg = ModelConfig { d_model: 32, d_ff: 64, ..tiny(&fx.vocab) };
    let mut m = random_init(&cfg, 5).unwrap();
    let spec = FinetuneSpec { lr: 5e-3, warmup: 50, batch_tokens: 300, label_smoothing: 0.0, ..quick_spec(600) };
    finetune_supervised(&mut m, &fx.vocab, &pairs, &pairs[..20], &spec, 7, no_events).unwrap();
    let probe: Vec<TokenSeq> = fx.mono_a.iter().take(50).cloned().collect();
    let out = backtranslate(&m, &fx.vocab, &probe, "A").unwrap();
    let same = out.iter().filter(|(s, o)| s.ids == o.ids).count();
    assert!(same >= 45, "{same}/50 copied");
}

#[test]
fn semi_corpus_balances_tokens_and_keeps_real_pairs() {
    let fx = fixture();
    let real: Vec<(TokenSeq, TokenSeq)> = fx.train[..37].to_vec();
    let syn: Vec<(TokenSeq, TokenSeq)> = fx.train.iter().map(|(a, b)| (b.clone(), a.clone())).take(290).collect();
    let c = build_semi_corpus(&real, syn.clone());
    let ratio = c.real_tokens as f64 / c.synthetic_tokens as f64;
    assert!((ratio - 1.0).abs() <= 0.02, "{ratio}");
    let tokens = |p: &(TokenSeq, TokenSeq)| p.0.len() + p.1.len();
    assert_eq!(c.pairs[..c.n_real].iter().map(tokens).sum::<usize>(), c.real_tokens);
    for p in &real {
        assert!(c.pairs[..c.n_real].contains(p));
    }
    assert_eq!(&c.pairs[c.n_real..], &syn[..]);
    let plain = build_semi_corpus(&real, Vec::new());
    assert_eq!(plain.pairs, real);
}

#[test]
fn semi_without_monolingual_data_matches_supervised() {
    let fx = fixture();
    let spec = quick_spec(30);
    let backward = random_init(&tiny(&fx.vocab), 8).unwrap();
    let mut a = random_init(&tiny(&fx.vocab), 1).unwrap();
    let mut b = a.clone();
    let (sa, _) = finetune_semi(&mut a, &backward, &fx.vocab, &fx.train, &[], &fx.dev, &spec, 3, no_events).unwrap();
    let sb = finetune_supervised(&mut b, &fx.vocab, &fx.train, &fx.dev, &spec, 3, no_events).unwrap();
    assert_eq!(sa.losses, sb.losses);
    assert_eq!(sa.curve, sb.curve);
}

#[test]
fn unsupervised_mask_window_and_resume() {
    let fx = fixture();
    let base = random_init(&tiny(&fx.vocab), 2).unwrap();
    let spec = FinetuneSpec { freq_mask_threshold: 0.02, freq_mask_steps: 3, batch_tokens: 60, ..quick_spec(6) };
    let masks = [fx.vocab.frequency_mask("B", 0.02).unwrap(), fx.vocab.frequency_mask("A", 0.02).unwrap()];
    let mut seen = Vec::new();
    let mut full = base.clone();
    let whole = finetune_unsupervised(&mut full, &fx.vocab, &fx.mono_a, &fx.mono_b, &fx.dev, &spec, 4, None, |e| {
        if let FinetuneEvent::Generated { step, outputs, allowed } = e {
            seen.push((step, allowed.is_some()));
            if let Some(a) = allowed {
                assert_eq!(a, &masks[((step - 1) % 2) as usize]);
                assert!(outputs.iter().all(|o| o.ids.iter().all(|id| a.contains(id))));
            }
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, (1..=6).map(|s| (s, s <= 3)).collect::<Vec<_>>());

    let mut part = base.clone();
    let first = finetune_unsupervised(&mut part, &fx.vocab, &fx.mono_a, &fx.mono_b, &fx.dev, &FinetuneSpec { steps: 4, ..spec.clone() }, 4, None, no_events).unwrap();
    let resume = ResumeState { step: first.final_step, opt: first.opt };
    let mut late = Vec::new();
    let second = finetune_unsupervised(&mut part, &fx.vocab, &fx.mono_a, &fx.mono_b, &fx.dev, &FinetuneSpec { steps: 2, ..spec.clone() }, 4, Some(resume), |e| {
        if let FinetuneEvent::Generated { step, allowed, .. } = e {
            late.push((step, allowed.is_some()));
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(late, vec![(5, false), (6, false)]);
    assert_eq!(second.final_step, 6);
    assert_eq!(&whole.losses[4..], &second.losses[..]);
    for ((_, x), (_, y)) in full.params.iter().zip(part.params.iter()) {
        assert_eq!(x.value, y.value);
    }
}

#[test]
fn ablation_freezes_everything_else() {
    let fx = fixture();
    let ck = pretrained(&fx.vocab);
    let spec = quick_spec(15);
    for (component, with_cross) in [(Component::EncoderLayers, false), (Component::DecoderLayers, true), (Component::Embedding, false)] {
        let ab = AblationSpec { component, with_cross_attention: with_cross, init_seed: 77 };
        let (m, out) = ablate(&ck, &fx.vocab, &tiny(&fx.vocab), &fx.train, &fx.dev, &ab, &spec, 1, no_events).unwrap();
        let ablated = ab.ablated().unwrap();
        let mut expected = BTreeSet::new();
        for (_, t) in m.params.iter() {
            let src = ck.model.params.value(ck.model.params.require(&t.name).unwrap());
            if ablated.contains(&t.component) {
                expected.insert(t.name.clone());
                assert_ne!(&t.value, src, "{} should move", t.name);
            } else {
                let same = t.value.data.iter().zip(&src.data).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "{} changed", t.name);
            }
        }
        assert_eq!(out.opt.m.keys().cloned().collect::<BTreeSet<_>>(), expected);
        assert_eq!(out.opt.v.keys().cloned().collect::<BTreeSet<_>>(), expected);
    }
    let bad = AblationSpec { component: Component::AuxHeads, with_cross_attention: false, init_seed: 1 };
    assert!(ablate(&ck, &fx.vocab, &tiny(&fx.vocab), &fx.train, &fx.dev, &bad, &spec, 1, no_events).is_err());
}
