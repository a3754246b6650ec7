use std::collections::BTreeSet;
use std::io::Write;

use crate::corpus::{TokenSeq, Vocab};
use crate::error::Result;
use crate::model::Seq2Seq;
use crate::noise::CorruptionRecord;

fn top_ids(vocab: &Vocab, lang: &str, k: usize) -> Result<BTreeSet<u32>> {
    let f = vocab.freq(lang)?;
    let mut ids: Vec<u32> = (0..vocab.len() as u32).filter(|&i| !vocab.is_special(i) && f[i as usize] > 0.0).collect();
    ids.sort_by(|a, b| f[*b as usize].total_cmp(&f[*a as usize]).then(a.cmp(b)));
    ids.truncate(k);
    Ok(ids.into_iter().collect())
}

/// Writes per-layer encoder vectors of non-special input positions whose
/// token is among the `top_tokens` most frequent of its language, up to
/// `sample_cap` positions. Columns: layer, token_id, lang, label, sent,
/// pos, v_0.. . Returns the number of data rows.
pub fn export_representations(
    model: &Seq2Seq,
    vocab: &Vocab,
    records: &[CorruptionRecord],
    sample_cap: usize,
    top_tokens: usize,
    out: &mut dyn Write,
) -> Result<usize> {
    let d = model.config.d_model;
    let mut header = vec!["layer", "token_id", "lang", "label", "sent", "pos"].into_iter().map(String::from).collect::<Vec<_>>();
    header.extend((0..d).map(|j| format!("v_{j}")));
    writeln!(out, "{}", header.join("\t"))?;
    let mut tops = std::collections::BTreeMap::new();
    let mut picked = Vec::new();
    'outer: for (s, rec) in records.iter().enumerate() {
        let lang = &rec.corrupted.lang;
        if !tops.contains_key(lang) {
            tops.insert(lang.clone(), top_ids(vocab, lang, top_tokens)?);
        }
        for (i, &id) in rec.corrupted.ids.iter().enumerate() {
            if picked.len() == sample_cap {
                break 'outer;
            }
            if !vocab.is_special(id) && tops[lang].contains(&id) {
                picked.push((s, i));
            }
        }
    }
    let sents: BTreeSet<usize> = picked.iter().map(|p| p.0).collect();
    let seqs: Vec<&TokenSeq> = sents.iter().map(|&s| &records[s].corrupted).collect();
    let mut states = std::collections::BTreeMap::new();
    for (chunk_s, chunk_q) in sents.iter().collect::<Vec<_>>().chunks(64).zip(seqs.chunks(64)) {
        for (&&s, st) in chunk_s.iter().zip(model.encode_batch(chunk_q, true)?) {
            states.insert(s, st);
        }
    }
    let mut rows = 0;
    for layer in 0..=model.config.layers_enc {
        for &(s, i) in &picked {
            let rec = &records[s];
            let v = states[&s].layers[layer].row(i);
            let vals: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
            writeln!(
                out,
                "{layer}\t{}\t{}\t{}\t{s}\t{i}\t{}",
                rec.corrupted.ids[i],
                rec.corrupted.lang,
                rec.labels[i].name(),
                vals.join("\t")
            )?;
            rows += 1;
        }
    }
    Ok(rows)
}
