//! Pre-norm transformer encoder–decoder with one tied embedding, the
//! auxiliary encoder heads and an MLM generator.

mod checkpoint;
mod infer;
mod params;

use serde::{Deserialize, Serialize};

pub use checkpoint::{read_container, write_container, Checkpoint, ContainerTensor};
pub use infer::{DecodeSession, HypState};
pub use params::{Component, ParamStore, Tensor};

use crate::autograd::{AttnSeg, Graph, Var};
use crate::corpus::{TokenSeq, MASK};
use crate::error::{invalid, Error, Result};
use crate::rng::LabRng;
use crate::tensor::{sinusoid, softmax, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Generator width and depth relative to the encoder.
    pub generator_size_mult: f64,
    /// Generator reuses the encoder's own tensors.
    pub generator_tied: bool,
    pub generator_enabled: bool,
    pub rtd_enabled: bool,
    /// Encoder layer (1-based) whose states feed the RTD head.
    pub rtd_layer: usize,
    pub emlm_enabled: bool,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers_enc: 2,
            layers_dec: 2,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            dropout: 0.1,
            generator_size_mult: 0.5,
            generator_tied: false,
            generator_enabled: false,
            rtd_enabled: false,
            rtd_layer: 2,
            emlm_enabled: false,
            vocab_size,
            max_len: 64,
        }
    }

    pub fn paper(vocab_size: usize) -> Self {
        Self {
            layers_enc: 6,
            layers_dec: 6,
            d_model: 512,
            d_ff: 2048,
            heads: 8,
            rtd_layer: 6,
            max_len: 256,
            ..Self::desk(vocab_size)
        }
    }

    /// Two layers each side at width 16, for numeric checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            layers_enc: 2,
            layers_dec: 2,
            d_model: 16,
            d_ff: 32,
            heads: 2,
            dropout: 0.0,
            max_len: 32,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return invalid(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.layers_enc == 0 {
            return invalid("at least one encoder layer is required");
        }
        if self.rtd_enabled && !(1..=self.layers_enc).contains(&self.rtd_layer) {
            return invalid(format!("rtd_layer {} outside 1..={}", self.rtd_layer, self.layers_enc));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.generator_size_mult > 0.0 && self.generator_size_mult <= 1.0) {
            return invalid(format!("generator_size_mult {} outside (0, 1]", self.generator_size_mult));
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return invalid("vocab_size and max_len must be positive");
        }
        Ok(())
    }

    /// Width, heads, feed-forward width and depth of an untied generator.
    pub fn generator_dims(&self) -> (usize, usize, usize, usize) {
        let m = self.generator_size_mult;
        let mut heads = self.heads;
        let d = ((self.d_model as f64 * m).round() as usize).max(1);
        while d % heads != 0 {
            heads -= 1;
        }
        let d_ff = ((self.d_ff as f64 * m).round() as usize).max(1);
        let layers = ((self.layers_enc as f64 * m).floor() as usize).max(1);
        (d, heads, d_ff, layers)
    }

    /// Names of fields whose values differ.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        a.keys().filter(|k| a[*k] != b[*k]).cloned().collect()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttnIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LnIds {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct FfnIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct EncLayer {
    pub ln1: LnIds,
    pub attn: AttnIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone)]
pub(crate) struct DecLayer {
    pub ln1: LnIds,
    pub self_attn: AttnIds,
    pub lnx: LnIds,
    pub cross: AttnIds,
    pub ln2: LnIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone)]
pub(crate) struct Stack {
    pub layers: Vec<EncLayer>,
    pub ln: LnIds,
    pub heads: usize,
    pub pe: Matrix,
}

#[derive(Debug, Clone)]
pub(crate) enum GenLayout {
    Tied,
    Untied { w_in: usize, w_out: usize, stack: Stack },
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: usize,
    pub enc: Stack,
    pub dec: Vec<DecLayer>,
    pub dec_ln: LnIds,
    pub rtd: Option<(usize, usize)>,
    pub gen: Option<GenLayout>,
}

/// Either creates tensors (fresh model) or looks them up (loaded model).
struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: Option<u64>,
}

impl Builder<'_> {
    fn t(&mut self, name: &str, rows: usize, cols: usize) -> Result<usize> {
        let id = match self.seed {
            Some(seed) => self.store.init(name, rows, cols, seed)?,
            None => self.store.require(name)?,
        };
        let v = self.store.value(id);
        if v.shape() != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                v.shape(),
                (rows, cols)
            )));
        }
        Ok(id)
    }

    fn ln(&mut self, p: &str, d: usize) -> Result<LnIds> {
        Ok(LnIds { g: self.t(&format!("{p}.g"), 1, d)?, b: self.t(&format!("{p}.b"), 1, d)? })
    }

    fn attn(&mut self, p: &str, d: usize) -> Result<AttnIds> {
        let mut w = |s: &str, r: usize| self.t(&format!("{p}.{s}"), r, d);
        Ok(AttnIds {
            wq: w("wq", d)?,
            bq: w("bq", 1)?,
            wk: w("wk", d)?,
            bk: w("bk", 1)?,
            wv: w("wv", d)?,
            bv: w("bv", 1)?,
            wo: w("wo", d)?,
            bo: w("bo", 1)?,
        })
    }

    fn ffn(&mut self, p: &str, d: usize, d_ff: usize) -> Result<FfnIds> {
        Ok(FfnIds {
            w1: self.t(&format!("{p}.w1"), d, d_ff)?,
            b1: self.t(&format!("{p}.b1"), 1, d_ff)?,
            w2: self.t(&format!("{p}.w2"), d_ff, d)?,
            b2: self.t(&format!("{p}.b2"), 1, d)?,
        })
    }

    fn stack(&mut self, p: &str, n: usize, d: usize, d_ff: usize, heads: usize, max_len: usize) -> Result<Stack> {
        let layers = (0..n)
            .map(|l| {
                Ok(EncLayer {
                    ln1: self.ln(&format!("{p}.{l}.ln1"), d)?,
                    attn: self.attn(&format!("{p}.{l}.attn"), d)?,
                    ln2: self.ln(&format!("{p}.{l}.ln2"), d)?,
                    ffn: self.ffn(&format!("{p}.{l}.ff"), d, d_ff)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ln = self.ln(&format!("{p}.ln"), d)?;
        Ok(Stack { layers, ln, heads, pe: Matrix::from_rows(&sinusoid(0..max_len, d)) })
    }
}

impl Layout {
    fn build(config: &ModelConfig, store: &mut ParamStore, seed: Option<u64>) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.d_model;
        let mut b = Builder { store, seed };
        let embed = b.t("embed", c.vocab_size, d)?;
        let enc = b.stack("enc", c.layers_enc, d, c.d_ff, c.heads, c.max_len)?;
        let dec = (0..c.layers_dec)
            .map(|l| {
                Ok(DecLayer {
                    ln1: b.ln(&format!("dec.{l}.ln1"), d)?,
                    self_attn: b.attn(&format!("dec.{l}.self"), d)?,
                    lnx: b.ln(&format!("dec.{l}.lnx"), d)?,
                    cross: b.attn(&format!("dec.{l}.cross"), d)?,
                    ln2: b.ln(&format!("dec.{l}.ln2"), d)?,
                    ffn: b.ffn(&format!("dec.{l}.ff"), d, c.d_ff)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec_ln = b.ln("dec.ln", d)?;
        let rtd = if c.rtd_enabled { Some((b.t("rtd.w", d, d)?, b.t("rtd.u", d, 1)?)) } else { None };
        let gen = match (c.generator_enabled, c.generator_tied) {
            (false, _) => None,
            (true, true) => Some(GenLayout::Tied),
            (true, false) => {
                let (dg, hg, ffg, lg) = c.generator_dims();
                Some(GenLayout::Untied {
                    w_in: b.t("gen.in", d, dg)?,
                    w_out: b.t("gen.out", dg, d)?,
                    stack: b.stack("gen", lg, dg, ffg, hg, c.max_len)?,
                })
            }
        };
        Ok(Layout { embed, enc, dec, dec_ln, rtd, gen })
    }
}

/// Rows of several sequences stacked into one matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packed {
    pub ids: Vec<u32>,
    /// `(start, len)` of each sequence.
    pub segs: Vec<(usize, usize)>,
}

impl Packed {
    pub fn new<'a>(seqs: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let mut ids = Vec::new();
        let mut segs = Vec::new();
        for s in seqs {
            segs.push((ids.len(), s.len()));
            ids.extend_from_slice(s);
        }
        Self { ids, segs }
    }

    pub fn from_seqs<'a>(seqs: impl IntoIterator<Item = &'a TokenSeq>) -> Self {
        Self::new(seqs.into_iter().map(|s| s.ids.as_slice()))
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    fn positions(&self) -> Vec<usize> {
        self.segs.iter().flat_map(|&(_, n)| 0..n).collect()
    }

    fn self_segs(&self) -> Vec<AttnSeg> {
        self.segs.iter().map(|&(s, n)| AttnSeg::square(s, n)).collect()
    }

    fn cross_segs(&self, enc: &Packed) -> Vec<AttnSeg> {
        self.segs
            .iter()
            .zip(&enc.segs)
            .map(|(&(q0, qn), &(k0, kn))| AttnSeg { q0, qn, k0, kn })
            .collect()
    }
}

/// Per-layer encoder states of one sequence: index 0 is the embedding
/// output, index `l` the output of layer `l`. The last entry has the final
/// layer norm applied.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub layers: Vec<Matrix>,
}

impl EncoderStates {
    pub fn final_layer(&self) -> &Matrix {
        self.layers.last().expect("at least one layer")
    }

    pub fn len(&self) -> usize {
        self.final_layer().rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph handles for an encoder pass over a packed batch.
pub struct EncGraph {
    pub layers: Vec<Var>,
}

impl EncGraph {
    pub fn final_layer(&self) -> Var {
        *self.layers.last().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) layout: Layout,
    /// Dropout used by training graphs; starts at `config.dropout`.
    pub dropout: f64,
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, Some(seed))?;
        Ok(Self { dropout: config.dropout, config, params, layout })
    }

    /// Wraps an existing store; every tensor the config calls for must exist.
    pub fn from_params(config: ModelConfig, mut params: ParamStore) -> Result<Self> {
        let layout = Layout::build(&config, &mut params, None)?;
        let expected = {
            let mut probe = ParamStore::new();
            Layout::build(&config, &mut probe, Some(0))?;
            probe.len()
        };
        if params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "store holds {} tensors, config expects {expected}",
                params.len()
            )));
        }
        Ok(Self { dropout: config.dropout, config, params, layout })
    }

    pub fn embed_id(&self) -> usize {
        self.layout.embed
    }

    /// Ids of the generator's transformer tensors (encoder ids when tied).
    pub fn generator_param_ids(&self) -> Result<Vec<usize>> {
        match &self.layout.gen {
            None => Err(Error::HeadDisabled("generator")),
            Some(GenLayout::Tied) => Ok(stack_ids(&self.layout.enc)),
            Some(GenLayout::Untied { stack, .. }) => Ok(stack_ids(stack)),
        }
    }

    pub fn encoder_param_ids(&self) -> Vec<usize> {
        stack_ids(&self.layout.enc)
    }

    pub fn tag_components(&self) -> Result<std::collections::BTreeMap<Component, Vec<String>>> {
        self.params.tag_components()
    }

    fn p(&self, g: &mut Graph, id: usize) -> Var {
        g.param(id, self.params.value(id), self.params.trainable(id))
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::IdOutOfRange { id, size: self.config.vocab_size });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Packed) -> Result<()> {
        self.check_ids(&batch.ids)?;
        if let Some(&(_, n)) = batch.segs.iter().find(|s| s.1 > self.config.max_len) {
            return Err(Error::OverLength { len: n, max: self.config.max_len });
        }
        Ok(())
    }

    /// Scaled token embeddings plus positions, width `d_model`.
    fn embed(&self, g: &mut Graph, batch: &Packed) -> Var {
        let e = self.p(g, self.layout.embed);
        let x = g.gather(e, &batch.ids);
        g.scale(x, (self.config.d_model as f64).sqrt())
    }

    fn add_positions(&self, g: &mut Graph, x: Var, batch: &Packed, pe: &Matrix) -> Var {
        let pos = g.constant(pe.select_rows(&batch.positions()));
        let x = g.add(x, pos);
        g.dropout(x, self.dropout)
    }

    fn attn(&self, g: &mut Graph, a: &AttnIds, xq: Var, xkv: Var, heads: usize, segs: &[AttnSeg], causal: bool) -> Var {
        let (wq, bq) = (self.p(g, a.wq), self.p(g, a.bq));
        let (wk, bk) = (self.p(g, a.wk), self.p(g, a.bk));
        let (wv, bv) = (self.p(g, a.wv), self.p(g, a.bv));
        let (wo, bo) = (self.p(g, a.wo), self.p(g, a.bo));
        let q = g.linear(xq, wq, Some(bq));
        let k = g.linear(xkv, wk, Some(bk));
        let v = g.linear(xkv, wv, Some(bv));
        let o = g.attention(q, k, v, heads, segs, causal);
        g.linear(o, wo, Some(bo))
    }

    fn ln(&self, g: &mut Graph, ids: &LnIds, x: Var) -> Var {
        let (gain, bias) = (self.p(g, ids.g), self.p(g, ids.b));
        g.layer_norm(x, gain, bias)
    }

    fn ffn(&self, g: &mut Graph, f: &FfnIds, x: Var) -> Var {
        let (w1, b1, w2, b2) = (self.p(g, f.w1), self.p(g, f.b1), self.p(g, f.w2), self.p(g, f.b2));
        let h = g.linear(x, w1, Some(b1));
        let h = g.gelu(h);
        g.linear(h, w2, Some(b2))
    }

    /// Residual stream through a stack; returns every layer output with the
    /// final norm applied to the last.
    fn run_stack(&self, g: &mut Graph, stack: &Stack, x: Var, segs: &[AttnSeg]) -> Vec<Var> {
        let mut out = vec![x];
        let mut x = x;
        for layer in &stack.layers {
            let h = self.ln(g, &layer.ln1, x);
            let a = self.attn(g, &layer.attn, h, h, stack.heads, segs, false);
            let a = g.dropout(a, self.dropout);
            x = g.add(x, a);
            let h = self.ln(g, &layer.ln2, x);
            let f = self.ffn(g, &layer.ffn, h);
            let f = g.dropout(f, self.dropout);
            x = g.add(x, f);
            out.push(x);
        }
        let last = out.pop().unwrap();
        let normed = self.ln(g, &stack.ln, last);
        out.push(normed);
        out
    }

    pub fn encode_graph(&self, g: &mut Graph, batch: &Packed) -> Result<EncGraph> {
        self.check_batch(batch)?;
        let x = self.embed(g, batch);
        let x = self.add_positions(g, x, batch, &self.layout.enc.pe);
        let layers = self.run_stack(g, &self.layout.enc, x, &batch.self_segs());
        Ok(EncGraph { layers })
    }

    /// Final decoder hidden states under teacher forcing.
    pub fn decode_hidden_graph(&self, g: &mut Graph, dec_in: &Packed, enc_final: Var, enc_batch: &Packed) -> Result<Var> {
        self.check_batch(dec_in)?;
        if dec_in.segs.len() != enc_batch.segs.len() {
            return Err(Error::LengthMismatch(format!(
                "{} decoder inputs for {} encoder inputs",
                dec_in.segs.len(),
                enc_batch.segs.len()
            )));
        }
        if g.value(enc_final).cols != self.config.d_model {
            return Err(Error::LengthMismatch(format!(
                "encoder width {} but d_model {}",
                g.value(enc_final).cols,
                self.config.d_model
            )));
        }
        let self_segs = dec_in.self_segs();
        let cross_segs = dec_in.cross_segs(enc_batch);
        let x = self.embed(g, dec_in);
        let mut x = self.add_positions(g, x, dec_in, &self.layout.enc.pe);
        let heads = self.config.heads;
        for layer in &self.layout.dec {
            let h = self.ln(g, &layer.ln1, x);
            let a = self.attn(g, &layer.self_attn, h, h, heads, &self_segs, true);
            let a = g.dropout(a, self.dropout);
            x = g.add(x, a);
            let h = self.ln(g, &layer.lnx, x);
            let c = self.attn(g, &layer.cross, h, enc_final, heads, &cross_segs, false);
            let c = g.dropout(c, self.dropout);
            x = g.add(x, c);
            let h = self.ln(g, &layer.ln2, x);
            let f = self.ffn(g, &layer.ffn, h);
            let f = g.dropout(f, self.dropout);
            x = g.add(x, f);
        }
        Ok(self.ln(g, &self.layout.dec_ln, x))
    }

    /// Projects hidden states onto the vocabulary through the tied embedding.
    pub fn project(&self, g: &mut Graph, h: Var) -> Var {
        let e = self.p(g, self.layout.embed);
        g.matmul(h, false, e, true)
    }

    pub fn decode_graph(&self, g: &mut Graph, dec_in: &Packed, enc_final: Var, enc_batch: &Packed) -> Result<Var> {
        let h = self.decode_hidden_graph(g, dec_in, enc_final, enc_batch)?;
        Ok(self.project(g, h))
    }

    /// eMLM logits at `rows` of the final encoder layer.
    pub fn emlm_logits_graph(&self, g: &mut Graph, enc_final: Var, rows: &[usize]) -> Result<Var> {
        if !self.config.emlm_enabled {
            return Err(Error::HeadDisabled("emlm"));
        }
        let h = g.select_rows(enc_final, rows);
        Ok(self.project(g, h))
    }

    /// RTD logits `uᵀ relu(W_D h)`, one row per input row of `states`.
    pub fn rtd_logits_graph(&self, g: &mut Graph, states: Var) -> Result<Var> {
        let (w, u) = self.layout.rtd.ok_or(Error::HeadDisabled("rtd"))?;
        let (w, u) = (self.p(g, w), self.p(g, u));
        let h = g.matmul(states, false, w, false);
        let h = g.relu(h);
        Ok(g.matmul(h, false, u, false))
    }

    /// Generator logits at `rows` of a packed masked batch.
    pub fn generator_logits_graph(&self, g: &mut Graph, masked: &Packed, rows: &[usize]) -> Result<Var> {
        let h = match self.layout.gen.as_ref().ok_or(Error::HeadDisabled("generator"))? {
            GenLayout::Tied => {
                let enc = self.encode_graph(g, masked)?;
                g.select_rows(enc.final_layer(), rows)
            }
            GenLayout::Untied { w_in, w_out, stack } => {
                self.check_batch(masked)?;
                let x = self.embed(g, masked);
                let wi = self.p(g, *w_in);
                let x = g.matmul(x, false, wi, false);
                let x = self.add_positions(g, x, masked, &stack.pe);
                let layers = self.run_stack(g, stack, x, &masked.self_segs());
                let h = g.select_rows(*layers.last().unwrap(), rows);
                let wo = self.p(g, *w_out);
                g.matmul(h, false, wo, false)
            }
        };
        Ok(self.project(g, h))
    }

    fn states_from_graph(g: &Graph, enc: &EncGraph, batch: &Packed, keep_all: bool) -> Vec<EncoderStates> {
        let pick: Vec<Var> = if keep_all { enc.layers.clone() } else { vec![enc.final_layer()] };
        batch
            .segs
            .iter()
            .map(|&(s, n)| EncoderStates {
                layers: pick.iter().map(|&v| g.value(v).select_rows(&(s..s + n).collect::<Vec<_>>())).collect(),
            })
            .collect()
    }

    pub fn forward_encoder(&self, corrupted: &TokenSeq, keep_all_layers: bool) -> Result<EncoderStates> {
        Ok(self.encode_batch(&[corrupted], keep_all_layers)?.remove(0))
    }

    /// Inference-mode encoder pass over several sequences at once.
    pub fn encode_batch(&self, seqs: &[&TokenSeq], keep_all_layers: bool) -> Result<Vec<EncoderStates>> {
        let batch = Packed::from_seqs(seqs.iter().copied());
        let mut g = Graph::inference();
        let enc = self.encode_graph(&mut g, &batch)?;
        Ok(Self::states_from_graph(&g, &enc, &batch, keep_all_layers))
    }

    /// Teacher-forced logits `(prefix_len, vocab_size)`.
    pub fn forward_decoder(&self, target_prefix: &TokenSeq, enc: &EncoderStates) -> Result<Matrix> {
        let mut g = Graph::inference();
        let fin = g.constant(enc.final_layer().clone());
        let enc_batch = Packed { ids: vec![0; enc.len()], segs: vec![(0, enc.len())] };
        let dec = Packed::from_seqs([target_prefix]);
        let logits = self.decode_graph(&mut g, &dec, fin, &enc_batch)?;
        Ok(g.value(logits).clone())
    }

    /// Generator distributions at the MASK positions of `masked_input`,
    /// with special ids given zero mass.
    pub fn generator_forward(&self, masked_input: &TokenSeq) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<usize> = (0..masked_input.len()).filter(|&i| masked_input.ids[i] == MASK).collect();
        if rows.is_empty() {
            return Err(Error::NoMaskedPositions);
        }
        let mut g = Graph::inference();
        let logits = self.generator_logits_graph(&mut g, &Packed::from_seqs([masked_input]), &rows)?;
        Ok(self.generator_dists(g.value(logits), &[]))
    }

    /// Softmax rows with the listed ids (typically specials) given zero mass.
    pub fn generator_dists(&self, logits: &Matrix, forbidden: &[u32]) -> Vec<Vec<f64>> {
        (0..logits.rows)
            .map(|r| {
                let mut row = logits.row(r).to_vec();
                for &f in forbidden {
                    row[f as usize] = f64::NEG_INFINITY;
                }
                softmax(&row)
            })
            .collect()
    }

    pub fn emlm_head(&self, enc: &EncoderStates, masked_positions: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference();
        let fin = g.constant(enc.final_layer().clone());
        let logits = self.emlm_logits_graph(&mut g, fin, masked_positions)?;
        let m = g.value(logits);
        Ok((0..m.rows).map(|r| softmax(m.row(r))).collect())
    }

    /// Probability of Original at each position, from the states of
    /// `rtd_layer` (requires all layers unless it is the last).
    pub fn rtd_head(&self, enc: &EncoderStates) -> Result<Vec<f64>> {
        if !self.config.rtd_enabled {
            return Err(Error::HeadDisabled("rtd"));
        }
        let states = self.rtd_states(enc)?;
        let mut g = Graph::inference();
        let s = g.constant(states.clone());
        let z = self.rtd_logits_graph(&mut g, s)?;
        Ok(g.value(z).data.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect())
    }

    fn rtd_states<'a>(&self, enc: &'a EncoderStates) -> Result<&'a Matrix> {
        let l = self.config.rtd_layer;
        if enc.layers.len() == self.config.layers_enc + 1 {
            Ok(&enc.layers[l])
        } else if l == self.config.layers_enc {
            Ok(enc.final_layer())
        } else {
            invalid(format!("rtd_layer {l} needs all encoder layers"))
        }
    }

    /// Graph index of the RTD input within an encoder pass.
    pub fn rtd_input(&self, enc: &EncGraph) -> Var {
        enc.layers[self.config.rtd_layer]
    }
}

fn stack_ids(s: &Stack) -> Vec<usize> {
    let mut out = Vec::new();
    for l in &s.layers {
        out.extend([l.ln1.g, l.ln1.b, l.ln2.g, l.ln2.b]);
        let a = &l.attn;
        out.extend([a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo]);
        out.extend([l.ffn.w1, l.ffn.b1, l.ffn.w2, l.ffn.b2]);
    }
    out.extend([s.ln.g, s.ln.b]);
    out
}

/// Dropout RNG for a training graph, or `None` when dropout is off.
pub fn dropout_rng(p: f64, seed: u64) -> Option<LabRng> {
    (p > 0.0).then(|| crate::rng::rng(seed))
}
