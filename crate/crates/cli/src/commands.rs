use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use seqlab::corpus::{gen_synthetic_pair, tokenize_corpus, tokenize_pairs, vocab_for_bundle, CorpusBundle, TokenSeq, Vocab};
use seqlab::model::{Checkpoint, Seq2Seq};
use seqlab::objectives::{pretrain, TrainEvent};
use seqlab::probes::{
    block_sensitivity, corrupt_eval, decoder_entropy, eval_token_probe, export_representations, sentence_retrieval,
    train_token_probe, ProbeReport,
};
use seqlab::rng::stage_seed;
use seqlab::translate::{
    ablate, corpus_bleu, decode_batch, finetune_semi, finetune_supervised, finetune_unsupervised, nmt_config,
    random_init, transfer_parameters, DecodeMode, FinetuneEvent, FinetuneOutcome, Regime,
};

use crate::config::ExperimentConfig;
use crate::run::RunDir;
use crate::UsageError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub lines: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestFile>,
    pub vocab_size: usize,
    pub vocab_hash: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn gen_data(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Value> {
    let bundle = gen_synthetic_pair(&cfg.corpus.synthetic)?;
    let vocab = vocab_for_bundle(&bundle)?;
    bundle.write(&run.path)?;
    vocab.save(&run.path)?;
    let mut files = Vec::new();
    for (name, lines) in bundle.files() {
        let f = ManifestFile { sha256: sha256_file(&run.file(&name))?, lines: lines.len(), name };
        run.metric(&f)?;
        files.push(f);
    }
    let manifest = Manifest { files, vocab_size: vocab.len(), vocab_hash: vocab.hash() };
    run.metric(&json!({ "vocab_size": manifest.vocab_size, "vocab_hash": manifest.vocab_hash }))?;
    run.write_json(MANIFEST, &manifest)?;
    Ok(json!({ "vocab_size": vocab.len() as f64 }))
}

struct Data {
    bundle: CorpusBundle,
    vocab: Vocab,
}

fn load_data(cfg: &ExperimentConfig) -> Result<Data> {
    let dir = cfg.corpus_dir().map_err(|e| UsageError(e.to_string()))?;
    let (a, b) = cfg.langs();
    let bundle = CorpusBundle::read(&dir, a, b).with_context(|| format!("cannot read corpus from {}", dir.display()))?;
    let vocab = Vocab::load(&dir).with_context(|| format!("cannot read vocabulary from {}", dir.display()))?;
    Ok(Data { bundle, vocab })
}

fn mono(cfg: &ExperimentConfig, d: &Data, max_len: usize) -> Vec<(String, Vec<TokenSeq>)> {
    let (a, b) = cfg.langs();
    vec![
        (a.to_string(), tokenize_corpus(&d.bundle.mono_a, &d.vocab, a, max_len)),
        (b.to_string(), tokenize_corpus(&d.bundle.mono_b, &d.vocab, b, max_len)),
    ]
}

fn pairs(cfg: &ExperimentConfig, d: &Data, split: &[(String, String)], max_len: usize) -> Vec<(TokenSeq, TokenSeq)> {
    let (a, b) = cfg.langs();
    tokenize_pairs(split, &d.vocab, a, b, max_len)
}

fn load_checkpoint(path: &str, what: &str) -> Result<Checkpoint> {
    if path.is_empty() {
        return Err(UsageError(format!("checkpoints.{what} is not set")).into());
    }
    Checkpoint::load(Path::new(path)).with_context(|| format!("cannot load checkpoint {path}"))
}

pub fn pretrain_cmd(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Value> {
    let d = load_data(cfg)?;
    let mc = cfg.model_for(d.vocab.len())?;
    let corpora = mono(cfg, &d, mc.max_len);
    let mut model = Seq2Seq::new(mc, stage_seed(cfg.seed, "init"))?;
    let vocab_hash = d.vocab.hash();
    let mut last = None;
    let extra = json!({ "noise": cfg.noise, "seed": cfg.seed });
    pretrain(&mut model, &d.vocab, &corpora, &cfg.noise, &cfg.pretrain, stage_seed(cfg.seed, "pretrain"), |e| {
        match e {
            TrainEvent::Metrics(r) => {
                last = Some(r.loss_total);
                run.metric(r).map_err(|e| seqlab::Error::Io(std::io::Error::other(e.to_string())))?;
            }
            TrainEvent::Checkpoint { step, model, opt } => {
                let mut ck = Checkpoint::new(model.clone(), vocab_hash.clone(), step);
                ck.extra = extra.clone();
                let name = if step == cfg.pretrain.steps { "model.ckpt".to_string() } else { format!("step{step}.ckpt") };
                ck.save(&run.file(&name))?;
                opt.save(&run.file(&name.replace(".ckpt", ".opt")))?;
            }
        }
        Ok(())
    })?;
    Ok(json!({ "final_loss": last }))
}

/// Initial translation model: a transferred checkpoint or a fresh one.
fn init_model(cfg: &ExperimentConfig, d: &Data) -> Result<Seq2Seq> {
    let mc = nmt_config(&cfg.model_for(d.vocab.len())?);
    if cfg.checkpoints.init == "random" {
        Ok(random_init(&mc, stage_seed(cfg.seed, "init"))?)
    } else {
        let ck = load_checkpoint(&cfg.checkpoints.init, "init")?;
        Ok(transfer_parameters(&ck, &mc, &d.vocab.hash())?)
    }
}

fn save_outcome(run: &mut RunDir, model: &Seq2Seq, out: &FinetuneOutcome, vocab: &Vocab) -> Result<Value> {
    Checkpoint::new(model.clone(), vocab.hash(), out.final_step).save(&run.file("model.ckpt"))?;
    let best = Seq2Seq::from_params(model.config.clone(), out.best_params.clone())?;
    Checkpoint::new(best, vocab.hash(), out.best_step).save(&run.file("best.ckpt"))?;
    out.opt.save(&run.file("model.opt"))?;
    run.write_json("curve.json", &out.curve)?;
    Ok(json!({ "dev_bleu": out.best_bleu, "best_step": out.best_step as f64 }))
}

fn forward_metrics(run: &mut RunDir) -> impl FnMut(FinetuneEvent<'_>) -> seqlab::Result<()> + '_ {
    |e| {
        if let FinetuneEvent::Metrics(r) = e {
            run.metric(r).map_err(|e| seqlab::Error::Io(std::io::Error::other(e.to_string())))?;
        }
        Ok(())
    }
}

pub fn finetune_cmd(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Value> {
    let d = load_data(cfg)?;
    let mut model = init_model(cfg, &d)?;
    let max_len = model.config.max_len;
    let train = pairs(cfg, &d, &d.bundle.train, max_len);
    let dev = pairs(cfg, &d, &d.bundle.dev, max_len);
    let seed = stage_seed(cfg.seed, "finetune");
    let spec = &cfg.finetune;
    let out = match spec.regime {
        Regime::Supervised => finetune_supervised(&mut model, &d.vocab, &train, &dev, spec, seed, forward_metrics(run))?,
        Regime::Semi => {
            let backward = load_checkpoint(&cfg.checkpoints.backward, "backward")?;
            if backward.vocab_hash != d.vocab.hash() {
                bail!("backward checkpoint was trained with a different vocabulary");
            }
            let mono_b = mono(cfg, &d, max_len).remove(1).1;
            let (out, semi) = finetune_semi(
                &mut model,
                &backward.model,
                &d.vocab,
                &train,
                &mono_b,
                &dev,
                spec,
                seed,
                forward_metrics(run),
            )?;
            run.metric(&json!({
                "semi_pairs": semi.pairs.len(),
                "real_tokens": semi.real_tokens,
                "synthetic_tokens": semi.synthetic_tokens,
            }))?;
            out
        }
        Regime::Unsupervised => {
            let mut m = mono(cfg, &d, max_len);
            let mono_b = m.remove(1).1;
            let mono_a = m.remove(0).1;
            finetune_unsupervised(&mut model, &d.vocab, &mono_a, &mono_b, &dev, spec, seed, None, forward_metrics(run))?
        }
    };
    save_outcome(run, &model, &out, &d.vocab)
}

pub fn ablate_cmd(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Value> {
    let d = load_data(cfg)?;
    if cfg.finetune.regime != Regime::Supervised {
        return Err(UsageError("ablation runs use the supervised regime".into()).into());
    }
    let ck = load_checkpoint(&cfg.checkpoints.init, "init")?;
    let mc = nmt_config(&cfg.model_for(d.vocab.len())?);
    let train = pairs(cfg, &d, &d.bundle.train, mc.max_len);
    let dev = pairs(cfg, &d, &d.bundle.dev, mc.max_len);
    let seed = stage_seed(cfg.seed, "finetune");
    let (model, out) =
        ablate(&ck, &d.vocab, &mc, &train, &dev, &cfg.ablation, &cfg.finetune, seed, forward_metrics(run))?;
    save_outcome(run, &model, &out, &d.vocab)
}

fn first_n(seqs: Vec<TokenSeq>, n: usize) -> Vec<TokenSeq> {
    seqs.into_iter().take(n).collect()
}

pub fn probe_cmd(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Value> {
    let d = load_data(cfg)?;
    let ck = load_checkpoint(&cfg.checkpoints.model, "model")?;
    if ck.vocab_hash != d.vocab.hash() {
        bail!("checkpoint was trained with a different vocabulary");
    }
    let model = &ck.model;
    let max_len = model.config.max_len;
    let p = &cfg.probe;
    let model_id = if cfg.name.is_empty() { cfg.checkpoints.model.clone() } else { cfg.name.clone() };
    let (a, b) = cfg.langs();
    let test_a = tokenize_corpus(&d.bundle.test.iter().map(|x| x.0.clone()).collect::<Vec<_>>(), &d.vocab, a, max_len);
    let test_b = tokenize_corpus(&d.bundle.test.iter().map(|x| x.1.clone()).collect::<Vec<_>>(), &d.vocab, b, max_len);
    let mut eval = first_n(test_a, p.eval_sentences);
    eval.extend(first_n(test_b, p.eval_sentences));
    let seed = stage_seed(cfg.seed, "probe");
    let mut results = BTreeMap::new();
    let mut emit = |run: &mut RunDir, r: ProbeReport| -> Result<()> {
        for (label, s) in &r.buckets {
            if let Some(v) = s.value {
                results.insert(format!("{}.{label}", r.probe), v);
            }
        }
        if let Some(v) = r.corrupted.value {
            results.insert(format!("{}.corrupted", r.probe), v);
        }
        for (k, v) in &r.scalars {
            results.insert(format!("{}.{k}", r.probe), *v);
        }
        for (i, v) in r.per_layer.iter().enumerate() {
            results.insert(format!("{}.layer{i}", r.probe), *v);
        }
        run.write_json(&format!("probe.{}.json", r.probe), &r)?;
        run.metric(&r)
    };
    let records = corrupt_eval(model, &d.vocab, &eval, &cfg.noise, seed)?;
    for kind in &p.kinds {
        match kind.as_str() {
            "token" => {
                let mut train = Vec::new();
                for (_, seqs) in mono(cfg, &d, max_len) {
                    train.extend(first_n(seqs, p.train_sentences));
                }
                let probe = train_token_probe(model, &d.vocab, &train, &cfg.noise, &p.token, seed)?;
                emit(run, eval_token_probe(&probe, model, &d.vocab, &eval, &cfg.noise, seed, &model_id)?)?;
            }
            "entropy" => emit(run, decoder_entropy(model, &d.vocab, &records, seed, &model_id)?)?,
            "blocking" => emit(
                run,
                block_sensitivity(model, &d.vocab, &records, &p.block_modes, p.block_scope, p.block_batch, seed, &model_id)?,
            )?,
            "retrieval" => {
                let dev: Vec<_> = pairs(cfg, &d, &d.bundle.dev, max_len).into_iter().take(p.retrieval_pairs).collect();
                emit(run, sentence_retrieval(model, &d.vocab, &dev, &model_id)?)?;
            }
            "export" => {
                let mut f = std::io::BufWriter::new(fs::File::create(run.file("representations.tsv"))?);
                let rows = export_representations(model, &d.vocab, &records, p.export_cap, p.export_top_tokens, &mut f)?;
                run.metric(&json!({ "probe": "export", "rows": rows }))?;
            }
            other => bail!("unknown probe kind `{other}`"),
        }
    }
    Ok(serde_json::to_value(results)?)
}

fn read_lines(path: &str) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path).with_context(|| format!("cannot read {path}"))?.lines().map(str::to_owned).collect())
}

pub fn translate_cmd(cfg: &ExperimentConfig, run: &mut RunDir) -> Result<Value> {
    let t = &cfg.translate;
    let ck = load_checkpoint(&cfg.checkpoints.model, "model")?;
    let vocab;
    let (sources, references) = if t.input.is_empty() {
        let d = load_data(cfg)?;
        let (a, _) = cfg.langs();
        let (src, rf): (Vec<String>, Vec<String>) =
            d.bundle.test.iter().map(|(x, y)| if t.src_lang == a { (x.clone(), y.clone()) } else { (y.clone(), x.clone()) }).unzip();
        vocab = d.vocab;
        (src, Some(rf))
    } else {
        vocab = Vocab::load(&cfg.corpus_dir().map_err(|e| UsageError(e.to_string()))?)?;
        let rf = if t.reference.is_empty() { None } else { Some(read_lines(&t.reference)?) };
        (read_lines(&t.input)?, rf)
    };
    if ck.vocab_hash != vocab.hash() {
        bail!("checkpoint was trained with a different vocabulary");
    }
    let seqs: Vec<TokenSeq> = sources.iter().map(|s| vocab.tokenize(s, &t.src_lang)).collect();
    let limit = ck.model.config.max_len.saturating_sub(2);
    if let Some(i) = seqs.iter().position(|s| s.len() > limit) {
        bail!("input line {} is longer than {limit} tokens", i + 1);
    }
    let refs: Vec<&TokenSeq> = seqs.iter().collect();
    let hyps = decode_batch(&ck.model, &vocab, &refs, &t.tgt_lang, DecodeMode::from_width(t.beam), None)?;
    let mut text = String::new();
    let mut outputs = Vec::with_capacity(hyps.len());
    for h in &hyps {
        let line = vocab.detokenize(&vocab.seq_from_ids(&h.ids, &t.tgt_lang)?)?;
        text.push_str(&line);
        text.push('\n');
        outputs.push(line);
    }
    fs::write(run.file("translations.txt"), text)?;
    match references {
        Some(r) => {
            let report = corpus_bleu(&outputs, &r)?;
            run.metric(&report)?;
            Ok(json!({ "bleu": report.bleu }))
        }
        None => Ok(json!({})),
    }
}

pub fn bleu_cmd(hyp: &Path, reference: &Path) -> Result<f64> {
    let h = read_lines(&hyp.to_string_lossy())?;
    let r = read_lines(&reference.to_string_lossy())?;
    Ok(corpus_bleu(&h, &r)?.bleu)
}
