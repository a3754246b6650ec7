mod common;

use std::fs;
use std::path::Path;

use common::{lab, lab_ok, small_config};
use seqlab::corpus::Vocab;
use seqlab::model::Checkpoint;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Lab {
    dir: tempfile::TempDir,
}

impl Lab {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(&dir.path().join("data"));
        fs::write(dir.path().join("small.toml"), &cfg).unwrap();
        lab_ok(&["gen-data", "--config", s(&dir.path().join("small.toml")), "--out", s(&dir.path().join("data"))]);
        Self { dir }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }

    fn config_with(&self, name: &str, extra: &str) -> String {
        let text = format!("{extra}\n{}", fs::read_to_string(self.path("small.toml")).unwrap());
        fs::write(self.path(name), text).unwrap();
        self.path(name).to_str().unwrap().to_string()
    }
}

#[test]
fn gen_data_manifest_matches_files_and_vocab() {
    let l = Lab::new();
    let data = l.path("data");
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let files = m["files"].as_array().unwrap();
    assert_eq!(files.len(), 8);
    for f in files {
        let text = fs::read_to_string(data.join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(text.lines().count() as u64, f["lines"].as_u64().unwrap());
    }
    assert_eq!(m["vocab_hash"].as_str().unwrap(), Vocab::load(&data).unwrap().hash());

    let cfg = l.path("small.toml");
    lab_ok(&["gen-data", "--config", s(&cfg), "--out", s(&l.path("again"))]);
    assert_eq!(
        fs::read(data.join("manifest.json")).unwrap(),
        fs::read(l.path("again").join("manifest.json")).unwrap()
    );
}

#[test]
fn stages_reproduce_metrics_and_load_checkpoints() {
    let l = Lab::new();
    let cfg = l.path("small.toml");
    for run in ["p1", "p2"] {
        lab_ok(&["pretrain", "--config", s(&cfg), "--seed", "3", "--out", s(&l.path(run))]);
    }
    let m1 = fs::read(l.path("p1/metrics.jsonl")).unwrap();
    assert!(!m1.is_empty());
    assert_eq!(m1, fs::read(l.path("p2/metrics.jsonl")).unwrap());
    let ck = Checkpoint::load(&l.path("p1/model.ckpt")).unwrap();
    assert_eq!(ck.vocab_hash, Vocab::load(&l.path("data")).unwrap().hash());
    assert_eq!(ck.step, 20);

    let ckpt = l.path("p1/model.ckpt");
    let probe_cfg = l.config_with("probe.toml", &format!("[checkpoints]\nmodel = \"{}\"\ninit = \"{0}\"", ckpt.display()));
    for run in ["q1", "q2"] {
        lab_ok(&["probe", "--config", &probe_cfg, "--out", s(&l.path(run))]);
    }
    assert_eq!(fs::read(l.path("q1/metrics.jsonl")).unwrap(), fs::read(l.path("q2/metrics.jsonl")).unwrap());
    assert!(l.path("q1/probe.token_probe.json").exists());

    lab_ok(&["finetune", "--config", &probe_cfg, "--out", s(&l.path("ft"))]);
    let best = Checkpoint::load(&l.path("ft/best.ckpt")).unwrap();
    assert!(!best.model.config.generator_enabled);
    let resolved = fs::read_to_string(l.path("ft/config.resolved.toml")).unwrap();
    assert!(resolved.contains("[finetune]"));
}

#[test]
fn exit_codes() {
    let l = Lab::new();
    let cfg = l.path("small.toml");
    assert_eq!(lab(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(lab(&["--help"]).status.code(), Some(0));
    let bad = l.config_with("bad.toml", "unknown_key = 1");
    let out = lab(&["pretrain", "--config", &bad, "--out", s(&l.path("x"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");

    let out = lab(&["gen-data", "--config", s(&cfg), "--out", s(&l.path("data"))]);
    assert_eq!(out.status.code(), Some(2));
    lab_ok(&["gen-data", "--config", s(&cfg), "--out", s(&l.path("data")), "--force"]);

    let missing = l.config_with("missing.toml", "[checkpoints]\ninit = \"/nonexistent/model.ckpt\"");
    assert_eq!(lab(&["finetune", "--config", &missing, "--out", s(&l.path("f"))]).status.code(), Some(2));
    assert!(!l.path("f/.lock").exists());
}

#[test]
fn locked_run_dir_is_refused() {
    let l = Lab::new();
    fs::create_dir(l.path("busy")).unwrap();
    fs::write(l.path("busy/.lock"), "1").unwrap();
    let out = lab(&["pretrain", "--config", s(&l.path("small.toml")), "--out", s(&l.path("busy")), "--force"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bleu_command() {
    let l = Lab::new();
    let t = l.path("data/test.B.txt");
    let out = lab_ok(&["bleu", s(&t), s(&t)]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "100.00");
    assert_eq!(lab(&["bleu", s(&t), s(&l.path("data/train.B.txt"))]).status.code(), Some(2));
}

#[test]
fn report_rows() {
    let l = Lab::new();
    lab_ok(&["pretrain", "--config", s(&l.path("small.toml")), "--out", s(&l.path("p"))]);
    let out = lab_ok(&["report", s(&l.path("p"))]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,metric,seed,value,median,sem,status");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("pretrain,final_loss,1,"));

    fs::create_dir(l.path("partial")).unwrap();
    let out = lab_ok(&["report", s(&l.path("p")), s(&l.path("partial"))]);
    assert!(String::from_utf8(out.stdout).unwrap().lines().last().unwrap().ends_with(",incomplete"));
}
