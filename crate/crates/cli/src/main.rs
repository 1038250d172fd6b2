//! Command-line front end for the model-merging toolkit.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the
//! `--config` file, the `MMRG_WORKDIR` environment variable, repeated
//! `--set KEY=VALUE` flags, then dedicated flags such as `--alpha`.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Ctx;
use error::{CliError, Result};
use mmrg_core::sampler::Strategy;

#[derive(Parser)]
#[command(name = "mmrg", version, about = "Weight-space merging toolkit for a toy latent-video diffusion model")]
struct Cli {
    /// Config file of KEY=VALUE lines (# starts a comment).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Working directory for all artifacts (overrides config and env).
    #[arg(long, global = true, value_name = "DIR")]
    workdir: Option<PathBuf>,

    /// Validate the configuration and print the plan without touching disk.
    #[arg(long, global = true)]
    dry_run: bool,

    /// Override a single config key, e.g. --set alpha=0.7 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic pretraining and fine-tuning corpora.
    GenData,
    /// Train the base model on the high-motion corpus.
    Pretrain,
    /// Attach the conditioning adapter and fine-tune on the low-motion corpus.
    Finetune,
    /// Extrapolate shared weights away from the fine-tuned model.
    Extrapolate {
        /// Extrapolation strength (defaults to the config value).
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Drop-and-rescale a stored delta.
    Dare {
        /// Delta checkpoint to prune, relative to the workdir.
        #[arg(long)]
        input: String,
        /// Output checkpoint name.
        #[arg(long)]
        output: String,
        /// Drop rate in [0, 1).
        #[arg(long)]
        p: Option<f64>,
        /// Mask seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Split the fine-tuning and extrapolation deltas into adapter,
    /// motion, and consistency parameter sets.
    Isolate,
    /// Merge the isolated sets onto the base model.
    BuildEnhanced,
    /// Draw one sample from a stored checkpoint.
    Sample {
        /// Checkpoint name, relative to the workdir.
        #[arg(long)]
        model: String,
        /// Noise seed (defaults to the config value).
        #[arg(long)]
        seed: Option<u64>,
        /// Conditioning, e.g. `right` or `down:low` (adapter models only).
        #[arg(long)]
        cond: Option<String>,
        /// Output artifact name.
        #[arg(long)]
        out: Option<String>,
    },
    /// Draw one sample alternating between the two enhanced models.
    SampleDecoupled {
        /// Noise seed (defaults to the config value).
        #[arg(long)]
        seed: Option<u64>,
        /// Conditioning, e.g. `right` or `down:low` (default `right`).
        #[arg(long)]
        cond: Option<String>,
        /// Output artifact name.
        #[arg(long)]
        out: Option<String>,
        /// Steps given to the high-motion model (default steps/2).
        #[arg(long)]
        switch_k: Option<usize>,
        /// Switch order: dyn-first or con-first.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Evaluate a checkpoint and write eval_<stage>.csv.
    Eval {
        /// Checkpoint name, relative to the workdir.
        #[arg(long)]
        model: String,
        /// Output CSV name (defaults to eval_<stage>.csv).
        #[arg(long)]
        out: Option<String>,
    },
    /// First-order check of the metric response to extrapolation on a
    /// small model pair; writes taylor.csv.
    TaylorCheck,
    /// Run every stage end to end and write the evaluation reports.
    Pipeline,
    /// Evaluate a grid of extrapolation strengths; writes sweep_alpha.csv.
    SweepAlpha {
        /// Comma-separated grid, e.g. 0,0.35,0.7.
        #[arg(long)]
        alphas: Option<String>,
    },
    /// Evaluate a grid of switch steps; writes sweep_k.csv.
    SweepK {
        /// Comma-separated grid, e.g. 0,12,25,50.
        #[arg(long)]
        ks: Option<String>,
        /// Switch order: dyn-first or con-first.
        #[arg(long)]
        strategy: Option<String>,
    },
}

fn parse_strategy(s: Option<&str>) -> Result<Option<Strategy>> {
    s.map(|v| Strategy::parse(v).map_err(|e| CliError::Config(e.to_string())))
        .transpose()
}

fn run(cli: Cli) -> Result<()> {
    let mut sets = cli.sets.clone();
    if let Some(dir) = &cli.workdir {
        sets.push(format!("workdir={}", dir.display()));
    }
    let cfg = config::ExperimentConfig::resolve(cli.config.as_deref(), &sets)?;
    let ctx = Ctx {
        cfg,
        dry_run: cli.dry_run,
    };
    match &cli.command {
        Command::GenData => commands::cmd_gen_data(&ctx),
        Command::Pretrain => commands::cmd_pretrain(&ctx),
        Command::Finetune => commands::cmd_finetune(&ctx),
        Command::Extrapolate { alpha } => commands::cmd_extrapolate(&ctx, *alpha),
        Command::Dare {
            input,
            output,
            p,
            seed,
        } => commands::cmd_dare(&ctx, input, output, *p, *seed),
        Command::Isolate => commands::cmd_isolate(&ctx),
        Command::BuildEnhanced => commands::cmd_build_enhanced(&ctx),
        Command::Sample {
            model,
            seed,
            cond,
            out,
        } => commands::cmd_sample(&ctx, model, *seed, cond.as_deref(), out.as_deref()),
        Command::SampleDecoupled {
            seed,
            cond,
            out,
            switch_k,
            strategy,
        } => commands::cmd_sample_decoupled(
            &ctx,
            *seed,
            cond.as_deref(),
            out.as_deref(),
            *switch_k,
            parse_strategy(strategy.as_deref())?,
        ),
        Command::Eval { model, out } => commands::cmd_eval(&ctx, model, out.as_deref()),
        Command::TaylorCheck => commands::cmd_taylor_check(&ctx),
        Command::Pipeline => commands::cmd_pipeline(&ctx),
        Command::SweepAlpha { alphas } => commands::cmd_sweep_alpha(&ctx, alphas.as_deref()),
        Command::SweepK { ks, strategy } => {
            commands::cmd_sweep_k(&ctx, ks.as_deref(), parse_strategy(strategy.as_deref())?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
