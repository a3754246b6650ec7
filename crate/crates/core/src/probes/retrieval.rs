use super::report::{BucketTally, ProbeReport};
use crate::corpus::{TokenSeq, Vocab};
use crate::error::{invalid, Error, Result};
use crate::model::Seq2Seq;

/// Mean-pooled payload states of every encoder layer (embedding first),
/// indexed `[layer][sentence]`.
pub fn pooled_layers(model: &Seq2Seq, vocab: &Vocab, seqs: &[TokenSeq]) -> Result<Vec<Vec<Vec<f64>>>> {
    let d = model.config.d_model;
    let mut out = vec![Vec::with_capacity(seqs.len()); model.config.layers_enc + 1];
    for chunk in seqs.chunks(64) {
        let framed: Vec<TokenSeq> = chunk.iter().map(|s| vocab.frame_source(s)).collect::<Result<_>>()?;
        let refs: Vec<&TokenSeq> = framed.iter().collect();
        for (s, st) in chunk.iter().zip(model.encode_batch(&refs, true)?) {
            for (l, m) in st.layers.iter().enumerate() {
                let mut v = vec![0.0; d];
                for i in 0..s.len() {
                    for (a, b) in v.iter_mut().zip(m.row(i)) {
                        *a += b;
                    }
                }
                v.iter_mut().for_each(|a| *a /= s.len().max(1) as f64);
                out[l].push(v);
            }
        }
    }
    Ok(out)
}

fn centered(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = vs[0].len();
    let mut mean = vec![0.0; d];
    for v in vs {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / vs.len() as f64;
        }
    }
    vs.iter().map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Index of the cosine-nearest target for each source (ties go to the
/// lowest index).
pub fn retrieve(src: &[Vec<f64>], tgt: &[Vec<f64>]) -> Vec<usize> {
    let tgt: Vec<Vec<f64>> = tgt.iter().map(|v| unit(v)).collect();
    src.iter()
        .map(|s| {
            let s = unit(s);
            let mut best = (0, f64::NEG_INFINITY);
            for (j, t) in tgt.iter().enumerate() {
                let c: f64 = s.iter().zip(t).map(|(a, b)| a * b).sum();
                if c > best.1 {
                    best = (j, c);
                }
            }
            best.0
        })
        .collect()
}

/// Fraction of sources whose nearest target, after centering each side on
/// its own mean, is their own pair.
pub fn retrieval_accuracy(src: &[Vec<f64>], tgt: &[Vec<f64>]) -> Result<f64> {
    if src.len() != tgt.len() {
        return Err(Error::LengthMismatch(format!("{} sources vs {} targets", src.len(), tgt.len())));
    }
    if src.len() < 2 {
        return invalid("retrieval needs at least two pairs");
    }
    let hits = retrieve(&centered(src), &centered(tgt)).iter().enumerate().filter(|&(i, &j)| i == j).count();
    Ok(hits as f64 / src.len() as f64)
}

/// Retrieval accuracy at every encoder layer, embedding output first.
pub fn sentence_retrieval(
    model: &Seq2Seq,
    vocab: &Vocab,
    pairs: &[(TokenSeq, TokenSeq)],
    model_id: &str,
) -> Result<ProbeReport> {
    if pairs.len() < 2 {
        return invalid("retrieval needs at least two pairs");
    }
    let src: Vec<TokenSeq> = pairs.iter().map(|p| p.0.clone()).collect();
    let tgt: Vec<TokenSeq> = pairs.iter().map(|p| p.1.clone()).collect();
    let (ps, pt) = (pooled_layers(model, vocab, &src)?, pooled_layers(model, vocab, &tgt)?);
    let mut report = BucketTally::default().finish("sentence_retrieval", model_id, &model.config, 0, |v| v);
    report.per_layer = ps.iter().zip(&pt).map(|(a, b)| retrieval_accuracy(a, b)).collect::<Result<_>>()?;
    Ok(report)
}
