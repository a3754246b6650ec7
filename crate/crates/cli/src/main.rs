//! `lab`: experiment driver for the seqlab pretraining lab.

mod commands;
mod config;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use run::RunDir;

/// Error caused by how the tool was invoked or configured.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "lab", version, about = "Denoising seq2seq pretraining lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config layered over its preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Reuse a non-empty run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus pair and its vocabulary.
    GenData(Common),
    /// Denoising pretraining on the monolingual corpora.
    Pretrain(Common),
    /// Translation finetuning (supervised, semi or unsupervised).
    Finetune(Common),
    /// Analysis probes on a pretrained model.
    Probe(Common),
    /// Reset one component of a pretrained model and finetune only it.
    Ablate(Common),
    /// Translate a file or the test split.
    Translate(Common),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Bleu { hyp: PathBuf, reference: PathBuf },
    /// CSV comparison table over run directories.
    Report {
        dirs: Vec<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type Stage = fn(&ExperimentConfig, &mut RunDir) -> Result<serde_json::Value>;

fn run_stage(name: &str, common: &Common, stage: Stage) -> Result<()> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref()).map_err(|e| UsageError(format!("{e:#}")))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let mut run = RunDir::create(&common.out, common.force, &cfg)?;
    let results = stage(&cfg, &mut run)?;
    run.finish(name, &cfg, results)
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => run_stage("gen-data", c, commands::gen_data),
        Command::Pretrain(c) => run_stage("pretrain", c, commands::pretrain_cmd),
        Command::Finetune(c) => run_stage("finetune", c, commands::finetune_cmd),
        Command::Probe(c) => run_stage("probe", c, commands::probe_cmd),
        Command::Ablate(c) => run_stage("ablate", c, commands::ablate_cmd),
        Command::Translate(c) => run_stage("translate", c, commands::translate_cmd),
        Command::Bleu { hyp, reference } => {
            println!("{:.2}", commands::bleu_cmd(hyp, reference)?);
            Ok(())
        }
        Command::Report { dirs, out } => {
            if dirs.is_empty() {
                return Err(UsageError("report needs at least one run directory".into()).into());
            }
            let csv = report::to_csv(&report::collect(dirs)?)?;
            if let Some(p) = out {
                std::fs::write(p, &csv)?;
            }
            print!("{csv}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}");
            eprintln!("lab: error: {}", msg.split_whitespace().collect::<Vec<_>>().join(" "));
            ExitCode::from(if e.downcast_ref::<UsageError>().is_some() { 1 } else { 2 })
        }
    }
}
