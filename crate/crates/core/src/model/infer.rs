//! Step-wise decoding with cached self-attention keys/values and
//! precomputed cross-attention projections.

use super::{AttnIds, LnIds, Seq2Seq};
use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::tensor::{gelu, gemm, layer_norm, Matrix};

/// Encoded sources shared by every hypothesis of a decoding call.
pub struct DecodeSession<'a> {
    model: &'a Seq2Seq,
    /// `cross[src][layer] = (K, V)` over that source's final encoder states.
    cross: Vec<Vec<(Matrix, Matrix)>>,
}

/// One partial hypothesis: its source and per-layer self-attention cache.
#[derive(Debug, Clone)]
pub struct HypState {
    pub src: usize,
    pub len: usize,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut y = Matrix::zeros(x.rows, w.cols);
    for r in 0..x.rows {
        y.row_mut(r).copy_from_slice(&b.data);
    }
    gemm(1.0, x, false, w, false, 1.0, &mut y);
    y
}

/// Multi-head attention of one query row over `n` cached key/value rows.
fn attend(q: &[f64], keys: &[f64], vals: &[f64], n: usize, heads: usize, out: &mut [f64]) {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut p = vec![0.0; n];
    for h in 0..heads {
        let c = h * dh..(h + 1) * dh;
        let mut mx = f64::NEG_INFINITY;
        for j in 0..n {
            let k = &keys[j * d..(j + 1) * d][c.clone()];
            p[j] = q[c.clone()].iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
            mx = mx.max(p[j]);
        }
        let mut z = 0.0;
        for x in p.iter_mut() {
            *x = (*x - mx).exp();
            z += *x;
        }
        let o = &mut out[c.clone()];
        o.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..n {
            let v = &vals[j * d..(j + 1) * d][c.clone()];
            let w = p[j] / z;
            for (a, b) in o.iter_mut().zip(v) {
                *a += w * b;
            }
        }
    }
}

impl<'a> DecodeSession<'a> {
    pub fn new(model: &'a Seq2Seq, sources: &[&TokenSeq]) -> Result<Self> {
        let states = model.encode_batch(sources, false)?;
        Ok(Self::from_states(model, states.into_iter().map(|s| s.layers.into_iter().last().unwrap()).collect()))
    }

    /// Builds a session from final-layer encoder states.
    pub fn from_states(model: &'a Seq2Seq, finals: Vec<Matrix>) -> Self {
        let p = &model.params;
        let cross = finals
            .iter()
            .map(|h| {
                model
                    .layout
                    .dec
                    .iter()
                    .map(|l| {
                        let a = &l.cross;
                        (linear(h, p.value(a.wk), p.value(a.bk)), linear(h, p.value(a.wv), p.value(a.bv)))
                    })
                    .collect()
            })
            .collect();
        Self { model, cross }
    }

    pub fn n_sources(&self) -> usize {
        self.cross.len()
    }

    pub fn start(&self, src: usize) -> HypState {
        let n = self.model.layout.dec.len();
        HypState { src, len: 0, k: vec![Vec::new(); n], v: vec![Vec::new(); n] }
    }

    fn ln(&self, x: &Matrix, ids: &LnIds) -> Matrix {
        let p = &self.model.params;
        layer_norm(x, &p.value(ids.g).data, &p.value(ids.b).data).0
    }

    fn out_proj(&self, a: &AttnIds, o: &Matrix) -> Matrix {
        linear(o, self.model.params.value(a.wo), self.model.params.value(a.bo))
    }

    /// Feeds one token to each hypothesis and returns next-token logits,
    /// one row per hypothesis.
    pub fn step(&self, hyps: &mut [HypState], tokens: &[u32]) -> Result<Matrix> {
        let m = self.model;
        let (d, heads) = (m.config.d_model, m.config.heads);
        if hyps.len() != tokens.len() {
            return Err(Error::LengthMismatch(format!("{} hypotheses, {} tokens", hyps.len(), tokens.len())));
        }
        m.check_ids(tokens)?;
        if let Some(h) = hyps.iter().find(|h| h.len >= m.config.max_len) {
            return Err(Error::OverLength { len: h.len + 1, max: m.config.max_len });
        }
        let p = &m.params;
        let b = hyps.len();
        let emb = p.value(m.layout.embed);
        let pe = &m.layout.enc.pe;
        let scale = (d as f64).sqrt();
        let mut x = Matrix::zeros(b, d);
        for (r, (h, &t)) in hyps.iter().zip(tokens).enumerate() {
            let (e, pos) = (emb.row(t as usize), pe.row(h.len));
            for (j, o) in x.row_mut(r).iter_mut().enumerate() {
                *o = e[j] * scale + pos[j];
            }
        }
        let mut att = Matrix::zeros(b, d);
        for (li, layer) in m.layout.dec.iter().enumerate() {
            let h = self.ln(&x, &layer.ln1);
            let a = &layer.self_attn;
            let q = linear(&h, p.value(a.wq), p.value(a.bq));
            let k = linear(&h, p.value(a.wk), p.value(a.bk));
            let v = linear(&h, p.value(a.wv), p.value(a.bv));
            for (r, hyp) in hyps.iter_mut().enumerate() {
                hyp.k[li].extend_from_slice(k.row(r));
                hyp.v[li].extend_from_slice(v.row(r));
                attend(q.row(r), &hyp.k[li], &hyp.v[li], hyp.len + 1, heads, att.row_mut(r));
            }
            x.add_assign(&self.out_proj(a, &att));

            let h = self.ln(&x, &layer.lnx);
            let a = &layer.cross;
            let q = linear(&h, p.value(a.wq), p.value(a.bq));
            for (r, hyp) in hyps.iter().enumerate() {
                let (ck, cv) = &self.cross[hyp.src][li];
                attend(q.row(r), &ck.data, &cv.data, ck.rows, heads, att.row_mut(r));
            }
            x.add_assign(&self.out_proj(a, &att));

            let h = self.ln(&x, &layer.ln2);
            let f = &layer.ffn;
            let mut u = linear(&h, p.value(f.w1), p.value(f.b1));
            u.data.iter_mut().for_each(|v| *v = gelu(*v));
            x.add_assign(&linear(&u, p.value(f.w2), p.value(f.b2)));
        }
        hyps.iter_mut().for_each(|h| h.len += 1);
        let h = self.ln(&x, &m.layout.dec_ln);
        Ok(Matrix::matmul(&h, false, emb, true))
    }
}
