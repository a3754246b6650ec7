use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Percentage in [0, 100].
    pub bleu: f64,
    /// Clipped precisions for n = 1..4 as percentages (after smoothing).
    pub ngram_precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'b, 'a>(words: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 over whitespace-separated sentences.
///
/// Higher-order precisions with zero matches are add-one smoothed; a zero
/// unigram precision gives 0.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let hw: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rw: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += hw.len();
        ref_len += rw.len();
        for n in 1..=4 {
            let hc = ngram_counts(&hw, n);
            let rc = ngram_counts(&rw, n);
            for (g, c) in &hc {
                matches[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += hw.len().saturating_sub(n - 1);
        }
    }
    if ref_len == 0 {
        return invalid("reference set is empty");
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if n > 0 && matches[n] == 0 {
            1.0 / (totals[n] + 1) as f64
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions[0] == 0.0 {
        0.0
    } else {
        bp * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuReport {
        bleu: 100.0 * bleu,
        ngram_precisions: precisions.map(|p| 100.0 * p),
        brevity_penalty: bp,
        hyp_len,
        ref_len,
    })
}
