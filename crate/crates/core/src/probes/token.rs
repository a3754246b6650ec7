use rand::Rng;
use serde::{Deserialize, Serialize};

use super::report::{BucketTally, ProbeReport};
use super::corrupt_eval;
use crate::autograd::Graph;
use crate::corpus::{TokenSeq, Vocab};
use crate::error::{invalid, Result};
use crate::model::Seq2Seq;
use crate::noise::{CorruptionLabel, CorruptionRecord, NoiseSpec};
use crate::rng::{derive_seed, label_tag, rng};
use crate::tensor::{log_softmax, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenProbeSpec {
    pub steps: u64,
    pub lr: f64,
    /// Positions per minibatch.
    pub batch: usize,
}

impl Default for TokenProbeSpec {
    fn default() -> Self {
        Self { steps: 5000, lr: 1e-4, batch: 256 }
    }
}

/// Final-layer encoder states at non-framing positions, with the original
/// token each position stands for and its corruption label.
#[derive(Debug, Clone)]
pub struct ProbeFeatures {
    pub x: Matrix,
    pub targets: Vec<u32>,
    pub labels: Vec<CorruptionLabel>,
}

pub fn probe_features(model: &Seq2Seq, vocab: &Vocab, records: &[CorruptionRecord]) -> Result<ProbeFeatures> {
    let d = model.config.d_model;
    let mut data = Vec::new();
    let mut targets = Vec::new();
    let mut labels = Vec::new();
    for chunk in records.chunks(64) {
        let seqs: Vec<&TokenSeq> = chunk.iter().map(|r| &r.corrupted).collect();
        for (rec, st) in chunk.iter().zip(model.encode_batch(&seqs, false)?) {
            for (i, src) in rec.align.iter().enumerate() {
                let t = rec.original.ids[src.start];
                if vocab.is_special(t) {
                    continue;
                }
                data.extend_from_slice(st.final_layer().row(i));
                targets.push(t);
                labels.push(rec.labels[i]);
            }
        }
    }
    Ok(ProbeFeatures { x: Matrix::from_vec(targets.len(), d, data), targets, labels })
}

/// Linear map from encoder states to vocabulary logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProbe {
    pub w: Matrix,
    pub b: Matrix,
    pub losses: Vec<f64>,
}

impl TokenProbe {
    /// Negative log-likelihood of each feature row's target.
    pub fn nll(&self, f: &ProbeFeatures) -> Vec<f64> {
        let mut logits = Matrix::matmul(&f.x, false, &self.w, false);
        for r in 0..logits.rows {
            for (v, b) in logits.row_mut(r).iter_mut().zip(&self.b.data) {
                *v += b;
            }
        }
        f.targets.iter().enumerate().map(|(r, &t)| -log_softmax(logits.row(r))[t as usize]).collect()
    }
}

/// Adam on a zero-initialized linear probe, minibatches drawn uniformly
/// with replacement.
pub fn train_probe_on_features(f: &ProbeFeatures, vocab_size: usize, spec: &TokenProbeSpec, seed: u64) -> Result<TokenProbe> {
    if f.targets.is_empty() {
        return invalid("no positions to train the probe on");
    }
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut w = Matrix::zeros(f.x.cols, vocab_size);
    let mut b = Matrix::zeros(1, vocab_size);
    let mut m = [w.clone(), b.clone()];
    let mut v = [w.clone(), b.clone()];
    let mut r = rng(seed);
    let mut losses = Vec::with_capacity(spec.steps as usize);
    for step in 1..=spec.steps {
        let idx: Vec<usize> = (0..spec.batch.min(f.targets.len())).map(|_| r.random_range(0..f.targets.len())).collect();
        let tgt: Vec<u32> = idx.iter().map(|&i| f.targets[i]).collect();
        let mut g = Graph::new(true, None);
        let x = g.constant(f.x.select_rows(&idx));
        let wv = g.input(w.clone());
        let bv = g.input(b.clone());
        let h = g.matmul(x, false, wv, false);
        let logits = g.add_bias(h, bv);
        let loss = g.cross_entropy(logits, &tgt, 0.0);
        losses.push(g.scalar(loss));
        let grads = g.backward(loss);
        let (c1, c2) = (1.0 - b1.powi(step as i32), 1.0 - b2.powi(step as i32));
        for (k, (p, var)) in [(&mut w, wv), (&mut b, bv)].into_iter().enumerate() {
            let gr = grads.leaf(var).expect("probe weights receive gradients");
            for i in 0..p.data.len() {
                m[k].data[i] = b1 * m[k].data[i] + (1.0 - b1) * gr.data[i];
                v[k].data[i] = b2 * v[k].data[i] + (1.0 - b2) * gr.data[i] * gr.data[i];
                p.data[i] -= spec.lr * (m[k].data[i] / c1) / ((v[k].data[i] / c2).sqrt() + eps);
            }
        }
    }
    Ok(TokenProbe { w, b, losses })
}

/// Trains a probe on the frozen model's final encoder states under `noise`.
pub fn train_token_probe(
    model: &Seq2Seq,
    vocab: &Vocab,
    data: &[TokenSeq],
    noise: &NoiseSpec,
    spec: &TokenProbeSpec,
    seed: u64,
) -> Result<TokenProbe> {
    let records = corrupt_eval(model, vocab, data, noise, derive_seed(seed, &[label_tag("probe-noise")]))?;
    let f = probe_features(model, vocab, &records)?;
    train_probe_on_features(&f, model.config.vocab_size, spec, derive_seed(seed, &[label_tag("probe-batches")]))
}

/// Probe perplexity per corruption bucket.
pub fn eval_token_probe(
    probe: &TokenProbe,
    model: &Seq2Seq,
    vocab: &Vocab,
    data: &[TokenSeq],
    noise: &NoiseSpec,
    seed: u64,
    model_id: &str,
) -> Result<ProbeReport> {
    let records = corrupt_eval(model, vocab, data, noise, derive_seed(seed, &[label_tag("probe-eval")]))?;
    let f = probe_features(model, vocab, &records)?;
    let mut tally = BucketTally::default();
    for (nll, &l) in probe.nll(&f).into_iter().zip(&f.labels) {
        tally.add(l, nll);
    }
    Ok(tally.finish("token_probe", model_id, &model.config, seed, f64::exp))
}
