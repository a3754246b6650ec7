#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub const LAB: &str = env!("CARGO_BIN_EXE_lab");

/// A corpus and model small enough for a stage to finish in seconds.
pub fn small_config(corpus_dir: &Path) -> String {
    format!(
        r#"
[corpus]
dir = "{}"
[corpus.synthetic]
vocab_size_per_lang = 40
sentence_length_range = [3, 6]
[corpus.synthetic.corpus_sizes]
monolingual = 400
parallel = 100
dev = 20
test = 20
[model]
d_model = 16
d_ff = 32
heads = 2
max_len = 32
[pretrain]
steps = 20
log_every = 5
[finetune]
steps = 20
eval_every = 10
[probe]
train_sentences = 50
eval_sentences = 10
retrieval_pairs = 10
kinds = ["token", "entropy", "blocking", "retrieval", "export"]
[probe.token]
steps = 50
"#,
        corpus_dir.display()
    )
}

pub fn lab(args: &[&str]) -> Output {
    Command::new(LAB).args(args).output().expect("lab runs")
}

pub fn lab_ok(args: &[&str]) -> Output {
    let out = lab(args);
    assert!(
        out.status.success(),
        "lab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}
