use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use vitrecon::selfcheck::Hooks;
use vitrecon_cli::commands;
use vitrecon_cli::config::{Overrides, RunConfig};

/// Vision-transformer denoising and inpainting.
#[derive(Parser)]
#[command(name = "vitrecon", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root containing train/ and test/.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    limit_train: Option<usize>,
    #[arg(long, global = true)]
    limit_test: Option<usize>,
    /// Override a config key, e.g. `--set use_rope=true`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator (adversarially when use_discriminator is set).
    Train,
    /// Evaluate a generator checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Corrupt and reconstruct one image, writing panels and a triptych.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Train and evaluate several switch combinations.
    Ablate {
        /// Combination such as `vanilla`, `rope` or `all+disc`. Repeatable;
        /// replaces the config's `combinations`.
        #[arg(long = "combo")]
        combos: Vec<String>,
    },
    /// Run the built-in invariant checks.
    Selfcheck,
    /// Write a synthetic dataset of smooth procedural images.
    SynthData {
        #[arg(long, default_value_t = 256)]
        n_train: usize,
        #[arg(long, default_value_t = 64)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let c = cli.common;
    let overrides = Overrides {
        seed: c.seed,
        out: c.out,
        dataset: c.dataset,
        limit_train: c.limit_train,
        limit_test: c.limit_test,
        set: c.set,
    };
    let load = || RunConfig::load(c.config.as_deref(), &overrides);
    let stdout = &mut std::io::stdout().lock();
    match cli.command {
        Command::Train => commands::train_cmd(&load()?, stdout).map(|_| true),
        Command::Eval { checkpoint } => commands::eval_cmd(&load()?, &checkpoint, stdout).map(|_| true),
        Command::Reconstruct { checkpoint, image } => {
            commands::reconstruct_cmd(&load()?, &checkpoint, &image, stdout).map(|_| true)
        }
        Command::Ablate { combos } => {
            let mut cfg = load()?;
            if !combos.is_empty() {
                cfg.combinations = combos;
            }
            commands::ablate_cmd(&cfg, stdout).map(|_| true)
        }
        Command::Selfcheck => commands::selfcheck_cmd(&Hooks::default(), stdout),
        Command::SynthData { n_train, n_test, size } => {
            let cfg = load()?;
            commands::synth_data_cmd(&cfg.out, n_train, n_test, size, cfg.seed).map(|_| true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
