use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use moda_core::gradcheck::{grad_check, Scope};
use moda_core::harness::train::{dataset_for, run_stage1, run_stage2};
use moda_core::harness::{
    eval_checkpoint, generate_answers, inspect_mask, load_model, run_ablation, write_ablation_csv, AblationMatrix, RunConfig,
};
use moda_core::synth::{save_dataset, SplitName};

#[derive(Parser)]
#[command(name = "moda", version, about = "Train and inspect the toy modulation-adapter model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

impl From<Split> for SplitName {
    fn from(s: Split) -> Self {
        match s {
            Split::Train => SplitName::Train,
            Split::Val => SplitName::Val,
            Split::Test => SplitName::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Blocks,
    End2end,
}

#[derive(Subcommand)]
enum Command {
    /// Alignment stage: trains the adapter only.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
    },
    /// Instruction tuning from a stage-1 checkpoint.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Single and paired accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Greedy answers for test samples.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated test sample ids.
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<u64>,
        /// Ask about this channel group instead of the stored question.
        #[arg(long, requires = "index")]
        group: Option<usize>,
        /// Ask about this visual token instead of the stored question.
        #[arg(long, requires = "group")]
        index: Option<usize>,
        #[arg(long, default_value_t = 4)]
        max_new_tokens: usize,
    },
    /// Finite-difference gradient check.
    GradCheck {
        #[arg(long, value_enum, default_value = "end2end")]
        scope: ScopeArg,
    },
    /// Exports modulation masks as CSV.
    InspectMask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<u64>,
        #[arg(long, requires = "index")]
        group: Option<usize>,
        #[arg(long, requires = "group")]
        index: Option<usize>,
        /// CSV path (default `<out>/masks.csv`).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Trains and evaluates every cell of an ablation matrix.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Matrix JSON `{"seeds": [...], "cells": [{"name", "moda"}]}`.
        /// Without it the standard axes run at the configured seed.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Writes the synthetic dataset splits.
    SynthGen {
        #[command(flatten)]
        common: Common,
    },
}

fn question(group: Option<usize>, index: Option<usize>) -> Option<(usize, usize)> {
    group.zip(index)
}

fn ensure_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn save_config(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

/// Result of a command: `Ok(false)` means a check ran and failed.
fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::TrainStage1 { common } => {
            let cfg = common.load()?;
            let dir = ensure_dir(&cfg)?;
            save_config(&cfg, &dir)?;
            let ckpt = run_stage1(&cfg)?;
            println!("{}", ckpt.display());
        }
        Command::TrainStage2 { common, ckpt } => {
            let cfg = common.load()?;
            let dir = ensure_dir(&cfg)?;
            save_config(&cfg, &dir)?;
            let out = run_stage2(&cfg, &ckpt)?;
            println!("{}", out.display());
        }
        Command::Eval { common, ckpt, split } => {
            let cfg = common.load()?;
            let r = eval_checkpoint(&cfg, &ckpt, split.into())?;
            let json = serde_json::json!({
                "questions": r.questions,
                "pairs": r.pairs,
                "loss": r.loss,
                "accuracy": r.accuracy,
                "paired_accuracy": r.paired_accuracy,
                "mean_mask": r.mean_mask,
                "mask_sparsity": r.mask_sparsity,
            });
            println!("{json}");
        }
        Command::Generate {
            common,
            ckpt,
            samples,
            group,
            index,
            max_new_tokens,
        } => {
            let cfg = common.load()?;
            let model = load_model(&cfg, &ckpt)?;
            let data = dataset_for(&cfg)?;
            let picked = moda_core::harness::tools::select_samples(&data.test, &samples)?;
            for g in generate_answers(&model, &picked, &cfg.task, question(group, index), max_new_tokens)? {
                let value = g.value.map_or_else(|| "-".to_string(), |v| v.to_string());
                let tokens: Vec<String> = g.tokens.iter().map(|t| t.to_string()).collect();
                println!("{}\tvalue={}\ttokens=[{}]", g.sample_id, value, tokens.join(" "));
            }
        }
        Command::GradCheck { scope } => {
            let scope = match scope {
                ScopeArg::Ops => Scope::Ops,
                ScopeArg::Blocks => Scope::Blocks,
                ScopeArg::End2end => Scope::End2End,
            };
            let report = grad_check(scope)?;
            print!("{}", report.render());
            return Ok(report.passed());
        }
        Command::InspectMask {
            common,
            ckpt,
            samples,
            group,
            index,
            csv,
        } => {
            let cfg = common.load()?;
            let path = match csv {
                Some(p) => p,
                None => ensure_dir(&cfg)?.join("masks.csv"),
            };
            let rows = inspect_mask(&cfg, &ckpt, &samples, question(group, index), &path)?;
            println!("{rows} rows -> {}", path.display());
        }
        Command::Ablate { common, matrix } => {
            let cfg = common.load()?;
            let matrix = match matrix {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str::<AblationMatrix>(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => AblationMatrix::standard(vec![cfg.seed]),
            };
            let dir = ensure_dir(&cfg)?;
            let rows = run_ablation(&cfg, &matrix, |row| match &row.report {
                Ok(r) => eprintln!("{} seed {}: acc {:.3} paired {:.3}", row.cell, row.seed, r.accuracy, r.paired_accuracy),
                Err(e) => eprintln!("{} seed {}: failed: {e}", row.cell, row.seed),
            })?;
            let path = dir.join("ablation.csv");
            write_ablation_csv(&rows, fs::File::create(&path)?)?;
            println!("{}", path.display());
        }
        Command::SynthGen { common } => {
            let cfg = common.load()?;
            let dir = ensure_dir(&cfg)?.join("dataset");
            let data = dataset_for(&cfg)?;
            if data.train.is_empty() && data.val.is_empty() && data.test.is_empty() {
                bail!("all split sizes are zero");
            }
            save_dataset(&data, &dir)?;
            println!("{}", dir.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .any(|c| c.downcast_ref::<moda_core::Error>().is_some_and(|m| m.is_numerical()));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}
