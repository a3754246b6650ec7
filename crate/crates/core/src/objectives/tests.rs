use super::gradcheck::{check_total_loss_gradients, rel_err};
use super::*;
use crate::autograd::Graph;
use crate::corpus::{gen_synthetic_pair, tokenize_corpus, vocab_for_bundle, CorpusSizes, SyntheticPairSpec, TokenSeq, Vocab};
use crate::model::{ModelConfig, Seq2Seq};
use crate::noise::NoiseSpec;
use crate::tensor::Matrix;

pub(crate) fn small_corpus() -> (Vocab, Vec<(String, Vec<TokenSeq>)>) {
    let spec = SyntheticPairSpec {
        vocab_size_per_lang: 30,
        corpus_sizes: CorpusSizes { monolingual: 300, parallel: 20, dev: 10, test: 10 },
        sentence_length_range: (3, 6),
        ..Default::default()
    };
    let bundle = gen_synthetic_pair(&spec).unwrap();
    let vocab = vocab_for_bundle(&bundle).unwrap();
    let a = tokenize_corpus(&bundle.mono_a, &vocab, "A", 32);
    let b = tokenize_corpus(&bundle.mono_b, &vocab, "B", 32);
    (vocab, vec![("A".into(), a), ("B".into(), b)])
}

fn full_config(vocab: &Vocab, tied: bool) -> ModelConfig {
    ModelConfig {
        generator_enabled: true,
        generator_tied: tied,
        rtd_enabled: true,
        emlm_enabled: true,
        ..ModelConfig::tiny(vocab.len())
    }
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let (vocab, corpora) = small_corpus();
    let payloads: Vec<&TokenSeq> = corpora[0].1.iter().take(2).collect();
    for tied in [false, true] {
        let mut model = Seq2Seq::new(full_config(&vocab, tied), 3).unwrap();
        // replacement exercises the generator; masked positions remain for eMLM via decoder-side masking
        for noise in [NoiseSpec::replace(0.35), NoiseSpec::mask(0.35)] {
            let batch = prepare_batch(&model, &vocab, &payloads, &noise, 11).unwrap();
            let mut b = batch.clone();
            if b.gen_inputs.is_empty() {
                let masked = prepare_batch(&model, &vocab, &payloads, &NoiseSpec::replace(0.35), 11).unwrap();
                b.gen_inputs = masked.gen_inputs;
            }
            let r = check_total_loss_gradients(&mut model, &b, &LossWeights::default(), 1e-5, 1e-5).unwrap();
            eprintln!("tied={tied} noise={} {r:?}", noise.label());
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }
}

#[test]
fn total_gradient_is_linear_in_losses() {
    let (vocab, corpora) = small_corpus();
    let payloads: Vec<&TokenSeq> = corpora[1].1.iter().take(3).collect();
    let model = Seq2Seq::new(full_config(&vocab, false), 4).unwrap();
    let mut batch = prepare_batch(&model, &vocab, &payloads, &NoiseSpec::mask(0.35), 2).unwrap();
    batch.gen_inputs = prepare_batch(&model, &vocab, &payloads, &NoiseSpec::replace(0.35), 2).unwrap().gen_inputs;
    let grads_for = |w: LossWeights| {
        let mut g = Graph::new(true, None);
        let lg = loss_graph(&model, &mut g, &batch, &w).unwrap();
        g.backward(lg.total)
    };
    let w = LossWeights::default();
    let total = grads_for(w);
    let zero = LossWeights { r: 0.0, emlm: 0.0, g: 0.0, rtd: 0.0 };
    let parts = [
        grads_for(LossWeights { r: w.r, ..zero }),
        grads_for(LossWeights { emlm: w.emlm, ..zero }),
        grads_for(LossWeights { g: w.g, ..zero }),
        grads_for(LossWeights { rtd: w.rtd, ..zero }),
    ];
    for (id, gt) in &total.params {
        let mut sum = Matrix::zeros(gt.rows, gt.cols);
        for p in &parts {
            if let Some(m) = p.param(*id) {
                sum.add_assign(m);
            }
        }
        for (a, b) in gt.data.iter().zip(&sum.data) {
            assert!((a - b).abs() <= 1e-12 + 1e-9 * a.abs().max(b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn loss_graph_agrees_with_standalone_losses() {
    let (vocab, corpora) = small_corpus();
    let payloads: Vec<&TokenSeq> = corpora[0].1.iter().take(1).collect();
    let model = Seq2Seq::new(full_config(&vocab, false), 4).unwrap();
    let batch = prepare_batch(&model, &vocab, &payloads, &NoiseSpec::mask(0.5), 9).unwrap();
    let mut g = Graph::inference();
    let lg = loss_graph(&model, &mut g, &batch, &LossWeights::default()).unwrap();
    let rec = &batch.sources[0];
    let enc = model.forward_encoder(&rec.corrupted, true).unwrap();
    let logits = model.forward_decoder(&batch.dec_inputs[0], &enc).unwrap();
    let lr = loss_reconstruction(&logits, &batch.targets[0]).unwrap();
    assert!((g.scalar(lg.r) - lr).abs() < 1e-12);
    let masked = rec.positions_with(crate::noise::CorruptionLabel::Masked);
    let dists = model.emlm_head(&enc, &masked).unwrap();
    let le = loss_emlm(&dists, &rec.original, &masked).unwrap();
    assert!((g.scalar(lg.emlm.unwrap()) - le).abs() < 1e-9);
    let probs = model.rtd_head(&enc).unwrap();
    let (ld, _) = loss_rtd(&probs, &rec.labels).unwrap();
    assert!((g.scalar(lg.rtd.unwrap()) - ld).abs() < 1e-9);
    let want = total_loss(lg.inputs(&g), &LossWeights::default()).unwrap();
    assert_eq!(want.total, g.scalar(lg.total));
}

#[test]
fn emlm_and_rtd_gradients_wrt_states() {
    let (vocab, corpora) = small_corpus();
    let model = Seq2Seq::new(full_config(&vocab, false), 6).unwrap();
    let src = vocab.frame_source(&corpora[0].1[0]).unwrap();
    let states = model.forward_encoder(&src, true).unwrap().final_layer().clone();
    let rows = [0usize, 2];
    let targets = [src.ids[0], src.ids[2]];
    let labels: Vec<f64> = (0..src.len()).map(|i| (i % 2) as f64).collect();
    let run = |h: &Matrix, grad: bool| {
        let mut g = Graph::new(grad, None);
        let x = g.input(h.clone());
        let l = model.emlm_logits_graph(&mut g, x, &rows).unwrap();
        let e = g.cross_entropy(l, &targets, 0.0);
        let z = model.rtd_logits_graph(&mut g, x).unwrap();
        let d = g.bce(z, &labels);
        let total = g.weighted_sum(&[(e, 1.0), (d, 25.0)]);
        let v = g.scalar(total);
        (v, grad.then(|| g.backward(total).leaf(x).cloned().unwrap()))
    };
    let (_, an) = run(&states, true);
    let an = an.unwrap();
    for i in 0..states.len() {
        let mut p = states.clone();
        p.data[i] += 1e-5;
        let mut m = states.clone();
        m.data[i] -= 1e-5;
        let n = (run(&p, false).0 - run(&m, false).0) / 2e-5;
        assert!(rel_err(an.data[i], n, 1e-6) < 1e-4, "elem {i}: {} vs {n}", an.data[i]);
    }
}

#[test]
fn generator_only_step_moves_decoder_logits() {
    let (vocab, corpora) = small_corpus();
    for tied in [false, true] {
        let mut model = Seq2Seq::new(full_config(&vocab, tied), 8).unwrap();
        let payloads: Vec<&TokenSeq> = corpora[0].1.iter().take(4).collect();
        let batch = prepare_batch(&model, &vocab, &payloads, &NoiseSpec::replace(0.35), 1).unwrap();
        let probe = &batch.sources[0].corrupted;
        let enc_before = model.forward_encoder(probe, false).unwrap();
        let before = model.forward_decoder(&batch.dec_inputs[0], &enc_before).unwrap();
        let dec_before = model.params.value(model.params.require("dec.0.self.wq").unwrap()).clone();
        let only_g = LossWeights { r: 0.0, emlm: 0.0, g: 1.0, rtd: 0.0 };
        let mut g = Graph::new(true, None);
        let lg = loss_graph(&model, &mut g, &batch, &only_g).unwrap();
        let grads = g.backward(lg.total);
        let mut opt = OptState::new(AdamConfig { base_lr: 1e-2, warmup: 1, ..Default::default() });
        adam_step(&mut opt, &grads, &mut model.params).unwrap();
        assert_eq!(model.params.value(model.params.require("dec.0.self.wq").unwrap()), &dec_before);
        let enc_after = model.forward_encoder(probe, false).unwrap();
        let after = model.forward_decoder(&batch.dec_inputs[0], &enc_after).unwrap();
        let diff = before.data.iter().zip(&after.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-4, "tied={tied}: max logit change {diff}");
    }
}

#[test]
fn replacement_never_samples_specials() {
    let (vocab, corpora) = small_corpus();
    let model = Seq2Seq::new(full_config(&vocab, false), 8).unwrap();
    let payloads: Vec<&TokenSeq> = corpora[0].1.iter().take(20).collect();
    let batch = prepare_batch(&model, &vocab, &payloads, &NoiseSpec::replace(0.5), 4).unwrap();
    for rec in &batch.sources {
        rec.check_consistency().unwrap();
        for (i, l) in rec.labels.iter().enumerate() {
            if *l == crate::noise::CorruptionLabel::Replaced {
                assert!(!vocab.is_special(rec.corrupted.ids[i]));
            }
        }
    }
}

#[test]
fn batches_are_single_language_and_loss_falls() {
    let (vocab, corpora) = small_corpus();
    let cfg = ModelConfig { dropout: 0.0, ..ModelConfig::tiny(vocab.len()) };
    let mut model = Seq2Seq::new(cfg, 1).unwrap();
    let spec = PretrainSpec {
        steps: 200,
        batch_tokens: 200,
        adam: AdamConfig { base_lr: 3e-3, warmup: 20, ..Default::default() },
        log_every: 10,
        ..Default::default()
    };
    let mut langs = Vec::new();
    let out = pretrain(&mut model, &vocab, &corpora, &NoiseSpec::mask(0.35), &spec, 5, |e| {
        if let TrainEvent::Metrics(m) = e {
            langs.push(m.lang.clone());
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(langs.len(), 20);
    assert!(langs.iter().all(|l| l == "A" || l == "B"));
    let first: f64 = out.history[..10].iter().map(|h| h.1.l_r).sum::<f64>() / 10.0;
    let last: f64 = out.history[190..].iter().map(|h| h.1.l_r).sum::<f64>() / 10.0;
    assert!(last < first, "{first} -> {last}");
    assert_eq!(out.opt.step, 200);
}

#[test]
fn prepare_batch_rejects_mixed_languages() {
    let (vocab, corpora) = small_corpus();
    let model = Seq2Seq::new(ModelConfig::tiny(vocab.len()), 1).unwrap();
    let mixed = [&corpora[0].1[0], &corpora[1].1[0]];
    assert!(prepare_batch(&model, &vocab, &mixed, &NoiseSpec::mask(0.35), 0).is_err());
    assert!(prepare_batch(&model, &vocab, &mixed[..1], &NoiseSpec::replace(0.35), 0).is_err());
}

#[test]
fn pretraining_is_deterministic() {
    let (vocab, corpora) = small_corpus();
    let run = || {
        let mut model = Seq2Seq::new(ModelConfig::tiny(vocab.len()), 1).unwrap();
        model.dropout = 0.1;
        let spec = PretrainSpec { steps: 6, batch_tokens: 100, log_every: 1, ..Default::default() };
        let mut lines = Vec::new();
        pretrain(&mut model, &vocab, &corpora, &NoiseSpec::shuffle(3), &spec, 9, |e| {
            if let TrainEvent::Metrics(m) = e {
                lines.push(serde_json::to_string(m).unwrap());
            }
            Ok(())
        })
        .unwrap();
        (lines, model.params)
    };
    assert_eq!(run(), run());
}
