use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use ehat::commands::{
    cmd_ablate, cmd_decode, cmd_eval, cmd_gen_corpus, cmd_gradcheck, cmd_sweep_lambda, cmd_train, cmd_variants,
    parse_fault,
};
use ehat::config::RunConfig;

/// Bilingual caption decoder with embedded heterogeneous attention.
#[derive(Parser)]
#[command(name = "ehat", version)]
struct Cli {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Replace existing output files.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Inputs {
    /// Corpus directory (config key `corpus_dir`).
    #[arg(long)]
    corpus: Option<String>,
    /// Model checkpoint (config key `checkpoint`).
    #[arg(long)]
    checkpoint: Option<String>,
    /// `train`, `val` or `test` (config key `eval_split`).
    #[arg(long)]
    split: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the cross-entropy or the self-critical stage.
    Train {
        #[arg(long)]
        run: PathBuf,
        /// `ce` or `rl` (config key `stage`).
        #[arg(long)]
        stage: Option<String>,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Score a checkpoint's greedy captions.
    Eval {
        /// Directory for the echoed config and the table.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Write greedy captions, optionally with per-step attention.
    Decode {
        #[arg(long)]
        out: PathBuf,
        /// Write ω vectors and HCA scores per step to this file.
        #[arg(long)]
        export_attention: Option<PathBuf>,
        /// Images to decode (config key `decode_limit`).
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Compare analytic and numerical gradients of every block.
    Gradcheck {
        #[arg(long, default_value_t = 11)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_backward: Option<String>,
    },
    /// Train the four ablation configurations.
    Ablate {
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Train one model per λ value.
    SweepLambda {
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Train the three reasoning-network variants.
    Variants {
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
    },
}

fn apply_inputs(cfg: &mut RunConfig, i: &Inputs) -> Result<()> {
    for (key, v) in [
        ("corpus_dir", &i.corpus),
        ("checkpoint", &i.checkpoint),
        ("eval_split", &i.split),
    ] {
        if let Some(v) = v {
            cfg.set(key, v)?;
        }
    }
    Ok(())
}

/// Output text and whether the command succeeded.
fn run(cli: Cli) -> Result<(String, bool)> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    let force = cli.force;
    let text = match cli.command {
        Command::GenCorpus { out } => cmd_gen_corpus(&cfg, &out, force)?,
        Command::Train { run, stage, inputs } => {
            apply_inputs(&mut cfg, &inputs)?;
            if let Some(s) = stage {
                cfg.set("stage", &s)?;
            }
            cmd_train(&cfg, &run, force)?.0
        }
        Command::Eval { out, inputs } => {
            apply_inputs(&mut cfg, &inputs)?;
            cmd_eval(&cfg, out.as_deref(), force)?.0
        }
        Command::Decode {
            out,
            export_attention,
            limit,
            inputs,
        } => {
            apply_inputs(&mut cfg, &inputs)?;
            if let Some(n) = limit {
                cfg.decode_limit = n;
            }
            cmd_decode(&cfg, &out, export_attention.as_deref(), force)?
        }
        Command::Gradcheck { seed, corrupt_backward } => {
            let fault = corrupt_backward.as_deref().map(parse_fault).transpose()?;
            let (text, ok, _) = cmd_gradcheck(seed, fault)?;
            return Ok((text, ok));
        }
        Command::Ablate { run, inputs } => {
            apply_inputs(&mut cfg, &inputs)?;
            cmd_ablate(&cfg, &run, force)?.0
        }
        Command::SweepLambda { run, inputs } => {
            apply_inputs(&mut cfg, &inputs)?;
            cmd_sweep_lambda(&cfg, &run, force)?.0
        }
        Command::Variants { run, inputs } => {
            apply_inputs(&mut cfg, &inputs)?;
            cmd_variants(&cfg, &run, force)?.0
        }
    };
    Ok((text, true))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok((text, ok)) => {
            print!("{text}");
            if ok {
                ExitCode::SUCCESS
            } else {
                eprintln!("gradient check failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(ehat::exit_code(&e) as u8)
        }
    }
}
