use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::losses::{effective_weights, LossBreakdown, LossInputs, LossWeights};
use super::optim::{adam_step, AdamConfig, OptState};
use crate::autograd::{Graph, Var};
use crate::corpus::{TokenSeq, Vocab, MASK};
use crate::error::{Error, Result};
use crate::model::{dropout_rng, Packed, Seq2Seq};
use crate::noise::{
    apply_decoder_noise, corrupt, fill_replacements, mask_for_replacement, shuffle_record, CorruptionLabel,
    CorruptionRecord, NoiseMethod, NoiseSpec, ReplacementSource,
};
use crate::rng::{derive_seed, label_tag, rng};

/// One corrupted training batch, fixed before any gradient is taken.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub lang: String,
    /// Encoder inputs with their corruption records.
    pub sources: Vec<CorruptionRecord>,
    pub dec_inputs: Vec<TokenSeq>,
    pub targets: Vec<TokenSeq>,
    pub gen_inputs: Vec<GenInput>,
}

/// A MASK-ed source for the generator with the ids it must predict.
#[derive(Debug, Clone)]
pub struct GenInput {
    pub masked: TokenSeq,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

impl PreparedBatch {
    pub fn n_tokens(&self) -> usize {
        self.sources.iter().map(|r| r.corrupted.len()).sum::<usize>() + self.targets.iter().map(TokenSeq::len).sum::<usize>()
    }
}

/// Generator distributions as a [`ReplacementSource`], specials excluded.
pub struct GeneratorSource<'a> {
    pub model: &'a Seq2Seq,
    pub forbidden: Vec<u32>,
}

impl ReplacementSource for GeneratorSource<'_> {
    fn distributions(&mut self, masked: &TokenSeq, positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference();
        let logits = self.model.generator_logits_graph(&mut g, &Packed::from_seqs([masked]), positions)?;
        Ok(self.model.generator_dists(g.value(logits), &self.forbidden))
    }
}

fn encoder_uses_generator(noise: &NoiseSpec) -> bool {
    matches!(noise.method, NoiseMethod::Replace | NoiseMethod::Compose)
}

/// Frames and corrupts `payloads`. Generator replacements are drawn from a
/// gradient-free generator pass, so sampling never carries gradients.
pub fn prepare_batch(
    model: &Seq2Seq,
    vocab: &Vocab,
    payloads: &[&TokenSeq],
    noise: &NoiseSpec,
    seed: u64,
) -> Result<PreparedBatch> {
    noise.validate()?;
    let lang = payloads.first().map(|p| p.lang.clone()).ok_or(Error::EmptyCorpus)?;
    if noise.uses_generator() && !model.config.generator_enabled {
        return Err(Error::HeadDisabled("generator"));
    }
    let forbidden: Vec<u32> = vocab.special_ids().collect();
    let mut source = GeneratorSource { model, forbidden };
    let mut sources = Vec::with_capacity(payloads.len());
    let mut dec_inputs = Vec::with_capacity(payloads.len());
    let mut targets = Vec::with_capacity(payloads.len());
    let mut gen_inputs = Vec::new();
    let mut pending = Vec::new();
    for (i, p) in payloads.iter().enumerate() {
        if p.lang != lang {
            return Err(Error::InvalidArgument(format!("batch mixes languages `{lang}` and `{}`", p.lang)));
        }
        let s = derive_seed(seed, &[i as u64]);
        let framed = vocab.frame_source(p)?;
        let (mut dec_in, target) = vocab.frame_target(p)?;
        if encoder_uses_generator(noise) {
            let rs = if noise.method == NoiseMethod::Compose { derive_seed(s, &[2]) } else { s };
            let (masked, pos) = mask_for_replacement(&framed, vocab, noise.ratio, derive_seed(rs, &[0]));
            pending.push((sources.len(), framed.clone(), pos.clone(), rs, s));
            if !pos.is_empty() {
                let targets = pos.iter().map(|&q| framed.ids[q]).collect();
                gen_inputs.push(GenInput { masked, positions: pos.clone(), targets });
            }
            sources.push(CorruptionRecord::identity(&framed));
        } else {
            sources.push(corrupt(&framed, vocab, noise, &mut source, s)?);
        }
        if let Some(dn) = noise.decoder_noise {
            dec_in = apply_decoder_noise(&dec_in, vocab, dn, &mut source, noise.policy, derive_seed(s, &[4]))?.corrupted;
        }
        dec_inputs.push(dec_in);
        targets.push(target);
    }
    if !gen_inputs.is_empty() {
        let (batch, rows) = gen_rows(&gen_inputs);
        let mut g = Graph::inference();
        let logits = model.generator_logits_graph(&mut g, &batch, &rows)?;
        let mut dists = model.generator_dists(g.value(logits), &source.forbidden).into_iter();
        for (slot, framed, pos, rs, s) in pending {
            if pos.is_empty() {
                continue;
            }
            let d: Vec<Vec<f64>> = dists.by_ref().take(pos.len()).collect();
            let mut rec = fill_replacements(&framed, &pos, &d, noise.policy, derive_seed(rs, &[1]))?;
            if noise.method == NoiseMethod::Compose {
                rec = shuffle_record(&rec, vocab, noise.k, noise.shuffle_ratio, derive_seed(s, &[3]));
            }
            sources[slot] = rec;
        }
    }
    Ok(PreparedBatch { lang, sources, dec_inputs, targets, gen_inputs })
}

/// Graph nodes of every active loss and their weighted total.
pub struct LossGraph {
    pub total: Var,
    pub r: Var,
    pub emlm: Option<Var>,
    pub g: Option<Var>,
    pub rtd: Option<Var>,
    pub weights: LossWeights,
}

impl LossGraph {
    pub fn inputs(&self, g: &Graph) -> LossInputs {
        LossInputs {
            r: g.scalar(self.r),
            emlm: self.emlm.map(|v| g.scalar(v)),
            g: self.g.map(|v| g.scalar(v)),
            rtd: self.rtd.map(|v| g.scalar(v)),
        }
    }

    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let i = self.inputs(g);
        LossBreakdown {
            l_r: i.r,
            l_emlm: i.emlm.unwrap_or(0.0),
            l_g: i.g.unwrap_or(0.0),
            l_rtd: i.rtd.unwrap_or(0.0),
            weights: self.weights,
            total: g.scalar(self.total),
        }
    }
}

/// Builds the full pretraining objective for a prepared batch.
pub fn loss_graph(model: &Seq2Seq, g: &mut Graph, batch: &PreparedBatch, weights: &LossWeights) -> Result<LossGraph> {
    weights.validate()?;
    let enc_batch = Packed::from_seqs(batch.sources.iter().map(|r| &r.corrupted));
    let enc = model.encode_graph(g, &enc_batch)?;
    let dec_batch = Packed::from_seqs(&batch.dec_inputs);
    let logits = model.decode_graph(g, &dec_batch, enc.final_layer(), &enc_batch)?;
    let targets: Vec<u32> = batch.targets.iter().flat_map(|t| t.ids.iter().copied()).collect();
    let r = g.cross_entropy(logits, &targets, 0.0);

    let emlm = if model.config.emlm_enabled {
        let mut rows = Vec::new();
        let mut tgt = Vec::new();
        for (rec, &(start, _)) in batch.sources.iter().zip(&enc_batch.segs) {
            for (i, (label, src)) in rec.labels.iter().zip(&rec.align).enumerate() {
                if *label == CorruptionLabel::Masked && src.len() == 1 && rec.corrupted.ids[i] == MASK {
                    rows.push(start + i);
                    tgt.push(rec.original.ids[src.start]);
                }
            }
        }
        if rows.is_empty() {
            None
        } else {
            let l = model.emlm_logits_graph(g, enc.final_layer(), &rows)?;
            Some(g.cross_entropy(l, &tgt, 0.0))
        }
    } else {
        None
    };

    let gen = if batch.gen_inputs.is_empty() {
        None
    } else {
        let (gb, rows) = gen_rows(&batch.gen_inputs);
        let tgt: Vec<u32> = batch.gen_inputs.iter().flat_map(|x| x.targets.iter().copied()).collect();
        let l = model.generator_logits_graph(g, &gb, &rows)?;
        Some(g.cross_entropy(l, &tgt, 0.0))
    };

    let rtd = if model.config.rtd_enabled {
        let z = model.rtd_logits_graph(g, model.rtd_input(&enc))?;
        let labels: Vec<f64> =
            batch.sources.iter().flat_map(|r| r.labels.iter().map(|l| if l.is_original() { 1.0 } else { 0.0 })).collect();
        Some(g.bce(z, &labels))
    } else {
        None
    };

    let present = LossInputs { r: 0.0, emlm: emlm.map(|_| 0.0), g: gen.map(|_| 0.0), rtd: rtd.map(|_| 0.0) };
    let w = effective_weights(&present, weights);
    let mut terms = vec![(r, w.r)];
    terms.extend(emlm.map(|v| (v, w.emlm)));
    terms.extend(gen.map(|v| (v, w.g)));
    terms.extend(rtd.map(|v| (v, w.rtd)));
    let total = g.weighted_sum(&terms);
    Ok(LossGraph { total, r, emlm, g: gen, rtd, weights: w })
}

fn gen_rows(inputs: &[GenInput]) -> (Packed, Vec<usize>) {
    let batch = Packed::from_seqs(inputs.iter().map(|x| &x.masked));
    let rows = batch.segs.iter().zip(inputs).flat_map(|(&(s, _), x)| x.positions.iter().map(move |p| s + p)).collect();
    (batch, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSpec {
    pub steps: u64,
    /// Token budget per batch, counting source and target tokens.
    pub batch_tokens: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub log_every: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    /// Record throughput in the metrics stream (makes it non-reproducible).
    pub wall_clock_metrics: bool,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_tokens: 2000,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            log_every: 50,
            checkpoint_every: 0,
            wall_clock_metrics: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lang: String,
    pub loss_total: f64,
    pub loss_r: f64,
    pub loss_emlm: Option<f64>,
    pub loss_g: Option<f64>,
    pub loss_rtd: Option<f64>,
    pub lr: f64,
    pub tokens_per_sec: Option<f64>,
}

pub enum TrainEvent<'a> {
    Metrics(&'a MetricsRecord),
    Checkpoint { step: u64, model: &'a Seq2Seq, opt: &'a OptState },
}

/// Cycles through a corpus in seeded per-epoch permutations and cuts
/// batches by token budget.
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
    n: usize,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { order: Vec::new(), cursor: 0, epoch: 0, seed, n };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut rng(derive_seed(self.seed, &[self.epoch])));
        self.cursor = 0;
    }

    pub fn next_index(&mut self) -> usize {
        if self.cursor == self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// Indices whose `cost` sums to at least `budget` (at least one index).
    pub fn next_batch(&mut self, budget: usize, cost: impl Fn(usize) -> usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut used = 0;
        while out.is_empty() || used < budget {
            let i = self.next_index();
            used += cost(i);
            out.push(i);
            if out.len() >= self.n.max(1) * 4 {
                break;
            }
        }
        out
    }
}

pub struct PretrainOutcome {
    pub opt: OptState,
    pub history: Vec<(String, LossBreakdown)>,
    pub bce_clamps: usize,
}

/// Denoising pretraining with single-language batches that alternate
/// between the given corpora.
pub fn pretrain(
    model: &mut Seq2Seq,
    vocab: &Vocab,
    corpora: &[(String, Vec<TokenSeq>)],
    noise: &NoiseSpec,
    spec: &PretrainSpec,
    seed: u64,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<PretrainOutcome> {
    if corpora.is_empty() || corpora.iter().any(|(_, c)| c.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    spec.adam.validate()?;
    let mut samplers: Vec<BatchSampler> = corpora
        .iter()
        .map(|(lang, c)| BatchSampler::new(c.len(), derive_seed(seed, &[label_tag("order"), label_tag(lang)])))
        .collect();
    let mut opt = OptState::new(spec.adam);
    let mut history = Vec::with_capacity(spec.steps as usize);
    let mut clamps = 0;
    let start = Instant::now();
    let mut tokens = 0usize;
    for step in 1..=spec.steps {
        let li = ((step - 1) % corpora.len() as u64) as usize;
        let (lang, corpus) = &corpora[li];
        let idx = samplers[li].next_batch(spec.batch_tokens, |i| 2 * corpus[i].len() + 3);
        let payloads: Vec<&TokenSeq> = idx.iter().map(|&i| &corpus[i]).collect();
        let batch = prepare_batch(model, vocab, &payloads, noise, derive_seed(seed, &[label_tag("noise"), step]))?;
        tokens += batch.n_tokens();
        let mut g = Graph::new(true, dropout_rng(model.dropout, derive_seed(seed, &[label_tag("dropout"), step])));
        let lg = loss_graph(model, &mut g, &batch, &spec.weights)?;
        let grads = g.backward(lg.total);
        let lr = adam_step(&mut opt, &grads, &mut model.params)?;
        clamps += g.clamp_count();
        let b = lg.breakdown(&g);
        if !b.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        history.push((lang.clone(), b));
        if step % spec.log_every.max(1) == 0 || step == spec.steps {
            let i = lg.inputs(&g);
            let rec = MetricsRecord {
                step,
                lang: lang.clone(),
                loss_total: b.total,
                loss_r: i.r,
                loss_emlm: i.emlm,
                loss_g: i.g,
                loss_rtd: i.rtd,
                lr,
                tokens_per_sec: spec.wall_clock_metrics.then(|| tokens as f64 / start.elapsed().as_secs_f64()),
            };
            on_event(TrainEvent::Metrics(&rec))?;
        }
        if (spec.checkpoint_every > 0 && step % spec.checkpoint_every == 0) || step == spec.steps {
            on_event(TrainEvent::Checkpoint { step, model, opt: &opt })?;
        }
    }
    Ok(PretrainOutcome { opt, history, bce_clamps: clamps })
}
