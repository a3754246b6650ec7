use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::bleu::corpus_bleu;
use super::decode::{decode_batch, DecodeMode};
use crate::autograd::{Graph, Var};
use crate::corpus::{TokenSeq, Vocab};
use crate::error::{invalid, Error, Result};
use crate::model::{dropout_rng, Checkpoint, Component, ModelConfig, Packed, ParamStore, Seq2Seq};
use crate::objectives::{adam_step, AdamConfig, BatchSampler, OptState, Schedule};
use crate::rng::{derive_seed, label_tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Supervised,
    Semi,
    Unsupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSpec {
    pub regime: Regime,
    pub lr: f64,
    pub warmup: u64,
    pub steps: u64,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub freq_mask_threshold: f64,
    pub freq_mask_steps: u64,
    pub beam_size: usize,
    /// Token budget per batch, source plus target.
    pub batch_tokens: usize,
    pub eval_every: u64,
    /// Beam width for periodic dev evaluation (1 = greedy).
    pub eval_beam: usize,
    pub log_every: u64,
    pub max_grad_norm: Option<f64>,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        Self {
            regime: Regime::Supervised,
            lr: 3e-5,
            warmup: 2500,
            steps: 2000,
            dropout: 0.3,
            label_smoothing: 0.1,
            freq_mask_threshold: 1e-3,
            freq_mask_steps: 2000,
            beam_size: 5,
            batch_tokens: 2000,
            eval_every: 500,
            eval_beam: 5,
            log_every: 50,
            max_grad_norm: None,
        }
    }
}

impl FinetuneSpec {
    /// Scaled-down values for the small desk model.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            warmup: 200,
            steps: 1200,
            dropout: 0.1,
            batch_tokens: 1000,
            eval_every: 200,
            eval_beam: 1,
            log_every: 25,
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            base_lr: self.lr,
            warmup: self.warmup,
            schedule: Schedule::InverseSqrt,
            max_grad_norm: self.max_grad_norm,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return invalid("label_smoothing outside [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid("dropout outside [0, 1)");
        }
        if self.beam_size == 0 || self.eval_beam == 0 {
            return invalid("beam widths must be at least 1");
        }
        Ok(())
    }
}

/// One line of the finetuning metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub step: u64,
    pub direction: String,
    pub loss: Option<f64>,
    pub lr: Option<f64>,
    pub dev_bleu: Option<f64>,
}

pub enum FinetuneEvent<'a> {
    Metrics(&'a FinetuneRecord),
    /// On-the-fly backtranslations of one unsupervised step and the
    /// restriction they were decoded under.
    Generated { step: u64, outputs: &'a [TokenSeq], allowed: Option<&'a BTreeSet<u32>> },
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub best_bleu: f64,
    pub best_step: u64,
    /// Parameters at the best dev evaluation.
    pub best_params: ParamStore,
    /// `(step, dev BLEU)` for every evaluation, starting with the initial one.
    pub curve: Vec<(u64, f64)>,
    pub losses: Vec<f64>,
    pub final_step: u64,
    pub opt: OptState,
}

/// Disables every auxiliary head so only the translation model remains.
pub fn nmt_config(c: &ModelConfig) -> ModelConfig {
    ModelConfig { generator_enabled: false, rtd_enabled: false, emlm_enabled: false, ..c.clone() }
}

/// A pretrained model narrowed to its translation tensors, checked against
/// the downstream configuration.
pub fn transfer_parameters(ckpt: &Checkpoint, downstream: &ModelConfig, vocab_hash: &str) -> Result<Seq2Seq> {
    if ckpt.vocab_hash != vocab_hash {
        return Err(Error::Checkpoint(format!(
            "vocabulary hash {} does not match {}",
            ckpt.vocab_hash, vocab_hash
        )));
    }
    let target = nmt_config(downstream);
    let mut source = nmt_config(&ckpt.model.config);
    source.dropout = target.dropout;
    source.generator_size_mult = target.generator_size_mult;
    source.generator_tied = target.generator_tied;
    source.rtd_layer = target.rtd_layer;
    let diff = source.diff(&target);
    if !diff.is_empty() {
        return Err(Error::ConfigMismatch(diff));
    }
    let params = ckpt.model.params.without(&[Component::AuxHeads, Component::Generator]);
    Seq2Seq::from_params(target, params)
}

/// Fresh translation model with the same shape as a pretrained one.
pub fn random_init(downstream: &ModelConfig, seed: u64) -> Result<Seq2Seq> {
    Seq2Seq::new(nmt_config(downstream), seed)
}

/// Label-smoothed cross-entropy of `tgt` given `src` for each pair.
pub fn translation_loss_graph(
    model: &Seq2Seq,
    g: &mut Graph,
    vocab: &Vocab,
    pairs: &[(&TokenSeq, &TokenSeq)],
    smoothing: f64,
) -> Result<Var> {
    let mut sources = Vec::with_capacity(pairs.len());
    let mut dec_in = Vec::with_capacity(pairs.len());
    let mut targets = Vec::new();
    for (s, t) in pairs {
        sources.push(vocab.frame_source(s)?);
        let (i, o) = vocab.frame_target(t)?;
        dec_in.push(i);
        targets.extend_from_slice(&o.ids);
    }
    let enc_batch = Packed::from_seqs(&sources);
    let enc = model.encode_graph(g, &enc_batch)?;
    let logits = model.decode_graph(g, &Packed::from_seqs(&dec_in), enc.final_layer(), &enc_batch)?;
    Ok(g.cross_entropy(logits, &targets, smoothing))
}

/// Dev BLEU of `model` translating each pair's source into its target language.
pub fn dev_bleu(model: &Seq2Seq, vocab: &Vocab, dev: &[(TokenSeq, TokenSeq)], beam: usize) -> Result<f64> {
    if dev.is_empty() {
        return invalid("dev set is empty");
    }
    let tgt_lang = &dev[0].1.lang;
    let srcs: Vec<&TokenSeq> = dev.iter().map(|(s, _)| s).collect();
    let hyps = decode_batch(model, vocab, &srcs, tgt_lang, DecodeMode::from_width(beam), None)?;
    let mut h = Vec::with_capacity(dev.len());
    let mut r = Vec::with_capacity(dev.len());
    for (hyp, (_, t)) in hyps.iter().zip(dev) {
        h.push(vocab.detokenize(&vocab.seq_from_ids(&hyp.ids, tgt_lang)?)?);
        r.push(vocab.detokenize(t)?);
    }
    Ok(corpus_bleu(&h, &r)?.bleu)
}

struct StepBatch {
    direction: String,
    pairs: Vec<(TokenSeq, TokenSeq)>,
    generated: Option<(Vec<TokenSeq>, Option<BTreeSet<u32>>)>,
}

fn pair_cost(s: &TokenSeq, t: &TokenSeq) -> usize {
    s.len() + t.len() + 3
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    model: &mut Seq2Seq,
    vocab: &Vocab,
    dev: &[(TokenSeq, TokenSeq)],
    spec: &FinetuneSpec,
    seed: u64,
    start_step: u64,
    opt: Option<OptState>,
    mut next_batch: impl FnMut(&Seq2Seq, u64) -> Result<StepBatch>,
    on_event: &mut dyn FnMut(FinetuneEvent<'_>) -> Result<()>,
) -> Result<FinetuneOutcome> {
    spec.validate()?;
    model.dropout = spec.dropout;
    let mut opt = opt.unwrap_or_else(|| OptState::new(spec.adam()));
    let first = dev_bleu(model, vocab, dev, spec.eval_beam)?;
    on_event(FinetuneEvent::Metrics(&FinetuneRecord {
        step: start_step,
        direction: "dev".into(),
        loss: None,
        lr: None,
        dev_bleu: Some(first),
    }))?;
    let mut out = FinetuneOutcome {
        best_bleu: first,
        best_step: start_step,
        best_params: model.params.clone(),
        curve: vec![(start_step, first)],
        losses: Vec::new(),
        final_step: start_step,
        opt: OptState::new(spec.adam()),
    };
    let end = start_step + spec.steps;
    for step in start_step + 1..=end {
        let batch = next_batch(model, step)?;
        if let Some((outputs, allowed)) = &batch.generated {
            on_event(FinetuneEvent::Generated { step, outputs, allowed: allowed.as_ref() })?;
        }
        let refs: Vec<(&TokenSeq, &TokenSeq)> = batch.pairs.iter().map(|(s, t)| (s, t)).collect();
        let mut g = Graph::new(true, dropout_rng(model.dropout, derive_seed(seed, &[label_tag("dropout"), step])));
        let loss = translation_loss_graph(model, &mut g, vocab, &refs, spec.label_smoothing)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let grads = g.backward(loss);
        let lr = adam_step(&mut opt, &grads, &mut model.params)?;
        out.losses.push(value);
        if step % spec.log_every.max(1) == 0 || step == end {
            on_event(FinetuneEvent::Metrics(&FinetuneRecord {
                step,
                direction: batch.direction.clone(),
                loss: Some(value),
                lr: Some(lr),
                dev_bleu: None,
            }))?;
        }
        if (spec.eval_every > 0 && (step - start_step) % spec.eval_every == 0) || step == end {
            let b = dev_bleu(model, vocab, dev, spec.eval_beam)?;
            out.curve.push((step, b));
            if b > out.best_bleu {
                out.best_bleu = b;
                out.best_step = step;
                out.best_params = model.params.clone();
            }
            on_event(FinetuneEvent::Metrics(&FinetuneRecord {
                step,
                direction: "dev".into(),
                loss: None,
                lr: None,
                dev_bleu: Some(b),
            }))?;
        }
    }
    out.final_step = end;
    out.opt = opt;
    Ok(out)
}

fn direction_of(pairs: &[(TokenSeq, TokenSeq)]) -> String {
    format!("{}-{}", pairs[0].0.lang, pairs[0].1.lang)
}

/// Supervised training on parallel pairs; the model is left at its final
/// state and the best-dev snapshot is returned in the outcome.
pub fn finetune_supervised(
    model: &mut Seq2Seq,
    vocab: &Vocab,
    train: &[(TokenSeq, TokenSeq)],
    dev: &[(TokenSeq, TokenSeq)],
    spec: &FinetuneSpec,
    seed: u64,
    mut on_event: impl FnMut(FinetuneEvent<'_>) -> Result<()>,
) -> Result<FinetuneOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let direction = direction_of(train);
    let mut sampler = BatchSampler::new(train.len(), derive_seed(seed, &[label_tag("order")]));
    run_loop(
        model,
        vocab,
        dev,
        spec,
        seed,
        0,
        None,
        |_, _| {
            let idx = sampler.next_batch(spec.batch_tokens, |i| pair_cost(&train[i].0, &train[i].1));
            Ok(StepBatch { direction: direction.clone(), pairs: idx.iter().map(|&i| train[i].clone()).collect(), generated: None })
        },
        &mut on_event,
    )
}

/// Greedy translation of each monolingual sentence into `out_lang`, paired
/// as `(synthetic, original)`.
pub fn backtranslate(
    model: &Seq2Seq,
    vocab: &Vocab,
    mono: &[TokenSeq],
    out_lang: &str,
) -> Result<Vec<(TokenSeq, TokenSeq)>> {
    let refs: Vec<&TokenSeq> = mono.iter().collect();
    let hyps = decode_batch(model, vocab, &refs, out_lang, DecodeMode::Greedy, None)?;
    hyps.into_iter()
        .zip(mono)
        .map(|(h, m)| Ok((vocab.seq_from_ids(&h.ids, out_lang)?, m.clone())))
        .collect()
}

/// Real pairs repeated until their token count matches the synthetic
/// pairs', followed by the synthetic pairs. Every real pair appears at
/// least once.
#[derive(Debug, Clone)]
pub struct SemiCorpus {
    pub pairs: Vec<(TokenSeq, TokenSeq)>,
    pub n_real: usize,
    pub real_tokens: usize,
    pub synthetic_tokens: usize,
}

pub fn build_semi_corpus(real: &[(TokenSeq, TokenSeq)], synthetic: Vec<(TokenSeq, TokenSeq)>) -> SemiCorpus {
    let tokens = |p: &(TokenSeq, TokenSeq)| p.0.len() + p.1.len();
    let synthetic_tokens: usize = synthetic.iter().map(tokens).sum();
    let mut pairs: Vec<(TokenSeq, TokenSeq)> = real.to_vec();
    let mut real_tokens: usize = real.iter().map(tokens).sum();
    'fill: while real_tokens < synthetic_tokens && !real.is_empty() {
        for p in real {
            if real_tokens >= synthetic_tokens {
                break 'fill;
            }
            real_tokens += tokens(p);
            pairs.push(p.clone());
        }
    }
    let n_real = pairs.len();
    pairs.extend(synthetic);
    SemiCorpus { pairs, n_real, real_tokens, synthetic_tokens }
}

/// Supervised training on real pairs mixed 1:1 with backtranslations of
/// target-side monolingual data produced by `backward`.
#[allow(clippy::too_many_arguments)]
pub fn finetune_semi(
    model: &mut Seq2Seq,
    backward: &Seq2Seq,
    vocab: &Vocab,
    parallel: &[(TokenSeq, TokenSeq)],
    mono_tgt: &[TokenSeq],
    dev: &[(TokenSeq, TokenSeq)],
    spec: &FinetuneSpec,
    seed: u64,
    on_event: impl FnMut(FinetuneEvent<'_>) -> Result<()>,
) -> Result<(FinetuneOutcome, SemiCorpus)> {
    if parallel.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let src_lang = &parallel[0].0.lang;
    let synthetic = backtranslate(backward, vocab, mono_tgt, src_lang)?;
    let corpus = build_semi_corpus(parallel, synthetic);
    let out = finetune_supervised(model, vocab, &corpus.pairs, dev, spec, seed, on_event)?;
    Ok((out, corpus))
}

/// Resumable position of an unsupervised run.
#[derive(Debug, Clone)]
pub struct ResumeState {
    pub step: u64,
    pub opt: OptState,
}

/// Online backtranslation: each step takes a monolingual batch, translates
/// it into the other language without gradient (restricted to frequent
/// tokens while the step is below `freq_mask_steps`), and trains on
/// reconstructing the original. Steps alternate between the two languages.
#[allow(clippy::too_many_arguments)]
pub fn finetune_unsupervised(
    model: &mut Seq2Seq,
    vocab: &Vocab,
    mono_a: &[TokenSeq],
    mono_b: &[TokenSeq],
    dev: &[(TokenSeq, TokenSeq)],
    spec: &FinetuneSpec,
    seed: u64,
    resume: Option<ResumeState>,
    mut on_event: impl FnMut(FinetuneEvent<'_>) -> Result<()>,
) -> Result<FinetuneOutcome> {
    if mono_a.is_empty() || mono_b.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let sides = [(mono_a, &mono_b[0].lang), (mono_b, &mono_a[0].lang)];
    let masks = [
        vocab.frequency_mask(&mono_b[0].lang, spec.freq_mask_threshold)?,
        vocab.frequency_mask(&mono_a[0].lang, spec.freq_mask_threshold)?,
    ];
    let (start, opt) = resume.map_or((0, None), |r| (r.step, Some(r.opt)));
    let mut samplers: Vec<BatchSampler> = sides
        .iter()
        .enumerate()
        .map(|(side, (c, _))| {
            let mut s = BatchSampler::new(c.len(), derive_seed(seed, &[label_tag("order"), label_tag(&c[0].lang)]));
            let used = if side == 0 { start.div_ceil(2) } else { start / 2 };
            for _ in 0..used {
                s.next_batch(spec.batch_tokens, |i| 2 * c[i].len() + 3);
            }
            s
        })
        .collect();
    run_loop(
        model,
        vocab,
        dev,
        spec,
        seed,
        start,
        opt,
        |m, step| {
            let side = ((step - 1) % 2) as usize;
            let (corpus, other) = sides[side];
            let idx = samplers[side].next_batch(spec.batch_tokens, |i| 2 * corpus[i].len() + 3);
            let originals: Vec<&TokenSeq> = idx.iter().map(|&i| &corpus[i]).collect();
            let allowed = (step - 1 < spec.freq_mask_steps).then(|| masks[side].clone());
            let hyps = decode_batch(m, vocab, &originals, other, DecodeMode::Greedy, allowed.as_ref())?;
            let generated: Vec<TokenSeq> =
                hyps.iter().map(|h| vocab.seq_from_ids(&h.ids, other)).collect::<Result<_>>()?;
            let pairs = generated.iter().cloned().zip(originals.iter().map(|&o| o.clone())).collect();
            Ok(StepBatch {
                direction: format!("{}-{}", other, corpus[0].lang),
                pairs,
                generated: Some((generated, allowed)),
            })
        },
        &mut on_event,
    )
}
