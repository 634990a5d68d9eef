use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use depthar::synthvid::{DepthMode, Split};
use depthar::training::format_delta;
use depthar::{Error, Result};
use depthar_cli::commands::{CHECKPOINT_FILE, CONFIG_FILE};
use depthar_cli::{
    cmd_ablate, cmd_eval, cmd_generate, cmd_train, exit_code, EvalRequest, ExperimentConfig,
    EXIT_CONFIG,
};

/// RGB + depth action recognition experiments on synthetic video.
#[derive(Parser, Debug)]
#[command(name = "depthar", version)]
struct Cli {
    /// Experiment config (flat JSON); defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the dataset manifest and class summary.
    Generate {
        /// Also write every rendered clip under `clips/`.
        #[arg(long)]
        cache: bool,
    },
    /// Train the configured ablation mode.
    Train {
        /// Defaults to `<out>/manifest.tsv`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `<out>/manifest.tsv`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
        /// ground_truth, pictorial or quantized_noisy[:levels:sigma].
        #[arg(long)]
        depth_mode: Option<DepthMode>,
    },
    /// Train all three modes on shared data and compare them.
    Ablate {
        /// Defaults to `<out>/manifest.tsv`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let out_of = |cfg: &ExperimentConfig| {
        cli.out
            .clone()
            .or_else(|| cfg.out.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    };
    match cli.command {
        Command::Generate { cache } => {
            let cfg = resolve_config(cli.config.as_deref(), cli.seed)?;
            let out = out_of(&cfg);
            let m = cmd_generate(&cfg, &out, cache)?;
            println!("wrote {} records to {}", m.records.len(), out.display());
        }
        Command::Train { ref manifest } => {
            let cfg = resolve_config(cli.config.as_deref(), cli.seed)?;
            let out = out_of(&cfg);
            let outcome = cmd_train(&cfg, &out, manifest.as_deref())?;
            println!(
                "{}: train top-1 {:.3}, val top-1 {:.3}",
                cfg.ablation, outcome.train.top1, outcome.val.top1
            );
        }
        Command::Eval {
            ref checkpoint,
            ref manifest,
            split,
            depth_mode,
        } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let checkpoint = checkpoint
                .clone()
                .unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            // without --config, use the config saved next to the checkpoint
            let saved = checkpoint.parent().map(|d| d.join(CONFIG_FILE));
            let config = cli.config.clone().or_else(|| saved.filter(|p| p.exists()));
            let cfg = resolve_config(config.as_deref(), cli.seed)?;
            let req = EvalRequest {
                checkpoint,
                manifest: manifest.clone(),
                split,
                depth_mode,
            };
            let eval = cmd_eval(&cfg, &out, &req)?;
            println!("{split} top-1 {:.3}", eval.top1);
            for (class, acc) in eval.per_class.iter().enumerate() {
                println!("  class {class}: {acc:.3}");
            }
        }
        Command::Ablate { ref manifest } => {
            let cfg = resolve_config(cli.config.as_deref(), cli.seed)?;
            let out = out_of(&cfg);
            let report = cmd_ablate(&cfg, &out, manifest.as_deref())?;
            println!("{:<16} val_top1", "mode");
            for (mode, top1, _) in &report.rows {
                println!("{:<16} {top1:.3}", mode.to_string());
            }
            println!("\nclass  rgb_only  full   delta");
            for d in &report.deltas {
                println!(
                    "{:>5}  {:.3}     {:.3}  {}",
                    d.class,
                    d.rgb,
                    d.fused,
                    format_delta(d.delta)
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Numeric(_) = e {
                eprintln!("hint: lower `lr` or check the inputs for non-finite values");
            }
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
