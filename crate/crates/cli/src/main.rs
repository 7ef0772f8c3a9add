mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Parser, Subcommand};
use fcnbnl_core::training::Precision;

use config::RunConfig;

const OVERRIDE_HELP: &str = "\
Any configuration key can be overridden as `--section.key value` (or
`--section.key=value`), e.g. `--train.lr 0.05 --pyramid.factors 1,2`.
Run `fcnbnl keys` for the full list with default values.";

#[derive(Parser, Debug)]
#[command(name = "fcnbnl", version, about = "Part-based image classification with learned prototypes", after_help = OVERRIDE_HELP)]
struct Cli {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for synthesis, the split, initialization and SGD.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Storage precision of checkpoint tensors.
    #[arg(long, global = true)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory.
    Synth,
    /// Train on the configured dataset, then evaluate on its test split.
    Train,
    /// Evaluate a checkpoint on the test split, optionally perturbed.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A perturbation name, or `all` for the full robustness sweep.
        #[arg(long)]
        perturb: Option<String>,
    },
    /// Time patch-wise against fully-convolutional extraction.
    Bench {
        /// Time this trained extractor instead of a random one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck,
    /// Print every configuration key with its resolved value.
    Keys,
}

/// Pulls `--section.key value` pairs out of the argument list so clap only
/// sees its own flags.
type Overrides = Vec<(String, String)>;

fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let dotted = arg
            .to_str()
            .and_then(|s| s.strip_prefix("--"))
            .filter(|s| s.split('=').next().is_some_and(|k| k.contains('.')))
            .map(str::to_owned);
        match dotted {
            Some(flag) => {
                let (key, value) = match flag.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let v = iter.next().ok_or_else(|| anyhow!("`--{flag}` needs a value"))?;
                        let v = v
                            .into_string()
                            .map_err(|_| anyhow!("`--{flag}` value is not valid UTF-8"))?;
                        (flag, v)
                    }
                };
                overrides.push((key, value));
            }
            None => rest.push(arg),
        }
    }
    Ok((rest, overrides))
}

fn run() -> Result<bool> {
    let (args, overrides) = split_overrides(std::env::args_os().collect())?;
    let cli = Cli::parse_from(args);
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if let Some(precision) = cli.precision {
        cfg.precision = precision;
    }
    for (key, value) in &overrides {
        cfg.set(key, value)?;
    }
    match cli.command {
        Command::Synth => commands::synth(&cfg)?,
        Command::Train => commands::train_cmd(&cfg)?,
        Command::Eval { checkpoint, perturb } => commands::eval(&cfg, &checkpoint, perturb.as_deref())?,
        Command::Bench { checkpoint } => commands::bench(&cfg, checkpoint.as_ref())?,
        Command::Gradcheck => return commands::gradcheck(&cfg),
        Command::Keys => print!("{}", cfg.to_text()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
