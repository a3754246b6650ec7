//! Experiment configuration: a TOML file layered over a named preset.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use seqlab::corpus::SyntheticPairSpec;
use seqlab::model::{Component, ModelConfig};
use seqlab::noise::NoiseSpec;
use seqlab::objectives::{AdamConfig, PretrainSpec};
use seqlab::probes::{BlockMode, BlockScope, TokenProbeSpec};
use seqlab::translate::{AblationSpec, FinetuneSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `desk` or `paper`; selects the defaults the file is layered over.
    pub preset: String,
    /// Label used by `lab report` to group runs. Empty means the command name.
    pub name: String,
    pub seed: u64,
    pub corpus: CorpusSection,
    /// `vocab_size = 0` takes the size of the corpus vocabulary.
    pub model: ModelConfig,
    pub noise: NoiseSpec,
    pub pretrain: PretrainSpec,
    pub finetune: FinetuneSpec,
    pub checkpoints: CheckpointSection,
    pub ablation: AblationSpec,
    pub probe: ProbeSection,
    pub translate: TranslateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Directory written by `lab gen-data`; read by every later stage.
    pub dir: String,
    pub synthetic: SyntheticPairSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSection {
    /// Initialization for `finetune` and `ablate`: a checkpoint path or `random`.
    pub init: String,
    /// Reverse-direction model used to backtranslate in the semi-supervised regime.
    pub backward: String,
    /// Model evaluated by `probe` and `translate`.
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    /// Any of `token`, `entropy`, `blocking`, `retrieval`, `export`.
    pub kinds: Vec<String>,
    /// Monolingual sentences per language used to train the token probe.
    pub train_sentences: usize,
    /// Test sentences per language used for evaluation.
    pub eval_sentences: usize,
    pub token: TokenProbeSpec,
    pub block_modes: Vec<BlockMode>,
    pub block_scope: BlockScope,
    pub block_batch: usize,
    pub retrieval_pairs: usize,
    pub export_cap: usize,
    pub export_top_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateSection {
    /// One source sentence per line. Empty means the test split.
    pub input: String,
    /// Optional reference file for scoring; ignored when `input` is empty.
    pub reference: String,
    pub src_lang: String,
    pub tgt_lang: String,
    pub beam: usize,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let desk = Self {
            preset: "desk".into(),
            name: String::new(),
            seed: 1,
            corpus: CorpusSection { dir: String::new(), synthetic: SyntheticPairSpec::default() },
            model: ModelConfig::desk(0),
            noise: NoiseSpec::mask(0.35),
            pretrain: PretrainSpec {
                steps: 1500,
                batch_tokens: 1000,
                adam: AdamConfig { base_lr: 1e-3, warmup: 200, ..AdamConfig::default() },
                log_every: 50,
                ..PretrainSpec::default()
            },
            finetune: FinetuneSpec::desk(),
            checkpoints: CheckpointSection { init: "random".into(), backward: String::new(), model: String::new() },
            ablation: AblationSpec { component: Component::EncoderLayers, with_cross_attention: false, init_seed: 1 },
            probe: ProbeSection {
                kinds: ["token", "entropy", "blocking", "retrieval"].map(String::from).to_vec(),
                train_sentences: 2000,
                eval_sentences: 200,
                token: TokenProbeSpec { lr: 1e-3, ..TokenProbeSpec::default() },
                block_modes: vec![BlockMode::Zero, BlockMode::Mix],
                block_scope: BlockScope::Corrupted,
                block_batch: 32,
                retrieval_pairs: 200,
                export_cap: 5000,
                export_top_tokens: 20,
            },
            translate: TranslateSection {
                input: String::new(),
                reference: String::new(),
                src_lang: "A".into(),
                tgt_lang: "B".into(),
                beam: 5,
            },
        };
        match name {
            "desk" => Ok(desk),
            "paper" => Ok(Self {
                preset: "paper".into(),
                model: ModelConfig::paper(0),
                pretrain: PretrainSpec {
                    steps: 300_000,
                    batch_tokens: 24_000,
                    adam: AdamConfig { base_lr: 5e-4, warmup: 16_000, ..AdamConfig::default() },
                    ..PretrainSpec::default()
                },
                finetune: FinetuneSpec::default(),
                probe: ProbeSection {
                    token: TokenProbeSpec { steps: 50_000, ..TokenProbeSpec::default() },
                    ..desk.probe.clone()
                },
                ..desk
            }),
            other => bail!("unknown preset `{other}` (expected desk or paper)"),
        }
    }

    /// Layers `text` over the preset it names (desk when absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        let preset = match user.get("preset") {
            None => "desk",
            Some(toml::Value::String(s)) => s.as_str(),
            Some(_) => bail!("`preset` must be a string"),
        };
        let base = toml::Table::try_from(Self::preset(preset)?)?;
        let merged = merge(base, user);
        let cfg: Self = merged.try_into().context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
                Self::from_toml(&text)
            }
            None => Self::from_toml(""),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.finetune.validate()?;
        self.pretrain.adam.validate()?;
        self.pretrain.weights.validate()?;
        if self.corpus.synthetic.lang_a == self.corpus.synthetic.lang_b {
            bail!("corpus languages must differ");
        }
        for k in &self.probe.kinds {
            if !PROBE_KINDS.contains(&k.as_str()) {
                bail!("unknown probe kind `{k}`");
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the resolved TOML text.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn corpus_dir(&self) -> Result<PathBuf> {
        if self.corpus.dir.is_empty() {
            bail!("corpus.dir is not set");
        }
        Ok(PathBuf::from(&self.corpus.dir))
    }

    pub fn langs(&self) -> (&str, &str) {
        (&self.corpus.synthetic.lang_a, &self.corpus.synthetic.lang_b)
    }

    /// Model config with an automatic vocabulary size filled in.
    pub fn model_for(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut c = self.model.clone();
        if c.vocab_size == 0 {
            c.vocab_size = vocab_size;
        } else if c.vocab_size != vocab_size {
            bail!("model.vocab_size is {} but the corpus vocabulary has {vocab_size} entries", c.vocab_size);
        }
        c.validate()?;
        Ok(c)
    }
}

pub const PROBE_KINDS: [&str; 5] = ["token", "entropy", "blocking", "retrieval", "export"];

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for p in ["desk", "paper"] {
            let c = ExperimentConfig::preset(p).unwrap();
            let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn user_values_override_nested_keys_only() {
        let c = ExperimentConfig::from_toml("seed = 7\n[pretrain.adam]\nbase_lr = 0.01\n").unwrap();
        let d = ExperimentConfig::preset("desk").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.pretrain.adam.base_lr, 0.01);
        assert_eq!(c.pretrain.adam.warmup, d.pretrain.adam.warmup);
        assert_eq!(c.pretrain.steps, d.pretrain.steps);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[model]\nlayers = 3").is_err());
        assert!(ExperimentConfig::from_toml("[pretrain.adam]\nlr = 3").is_err());
        assert!(ExperimentConfig::from_toml("preset = \"huge\"").is_err());
    }

    #[test]
    fn paper_preset_keeps_appendix_values() {
        let c = ExperimentConfig::from_toml("preset = \"paper\"").unwrap();
        assert_eq!(c.model.layers_enc, 6);
        assert_eq!(c.pretrain.adam.base_lr, 5e-4);
        assert_eq!(c.finetune.label_smoothing, 0.1);
    }
}
