use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use measpipe::workflow::Subtask;

mod commands;
mod config;

use config::{env_overrides, parse_set, read_config_file, Override, RunConfig, Source, Usage};

#[derive(Parser, Debug)]
#[command(name = "measpipe", version, about = "Extract measurements from scientific text")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set tagger.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct RunFlags {
    #[arg(long)]
    text_dir: Option<PathBuf>,
    #[arg(long)]
    tsv_dir: Option<PathBuf>,
    /// Parent of the timestamped run directories.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    device: Option<String>,
    /// hash | embedding
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    hidden_size: Option<usize>,
    /// softmax | logits
    #[arg(long)]
    emissions: Option<String>,
    /// fixed | sweep
    #[arg(long)]
    threshold_mode: Option<String>,
    #[arg(long)]
    split_ratio: Option<f64>,
    /// wordpiece | whitespace
    #[arg(long)]
    tokenizer: Option<String>,
    #[arg(long)]
    vocab_file: Option<PathBuf>,
}

impl RunFlags {
    fn overrides(&self) -> Vec<Override> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        [
            ("text_dir", path(&self.text_dir)),
            ("tsv_dir", path(&self.tsv_dir)),
            ("out_dir", path(&self.out_dir)),
            ("seed", self.seed.map(|v| v.to_string())),
            ("device", self.device.clone()),
            ("encoder", self.encoder.clone()),
            ("hidden_size", self.hidden_size.map(|v| v.to_string())),
            ("emissions", self.emissions.clone()),
            ("threshold_mode", self.threshold_mode.clone()),
            ("split_ratio", self.split_ratio.map(|v| v.to_string())),
            ("tokenizer", self.tokenizer.clone()),
            ("vocab_file", path(&self.vocab_file)),
        ]
        .into_iter()
        .filter_map(|(key, value)| {
            value.map(|value| Override {
                source: Source::Flag,
                key: key.to_string(),
                value,
            })
        })
        .collect()
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a corpus, split it and cache training examples in a new run directory.
    Preprocess {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Train one model from a run's caches.
    Train {
        /// quantity, unit, modifier, entity, property, qualifier_q or qualifier_p
        #[arg(value_parser = parse_subtask)]
        subtask: Subtask,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run the trained pipeline over a directory of texts.
    Predict {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        text_dir: PathBuf,
        /// Defaults to `<run>/predictions`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted TSVs against gold TSVs.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        text_dir: PathBuf,
        /// `doc_id<TAB>subdomain` lines for a per-subdomain breakdown.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long, default_value = "evaluation")]
        out: PathBuf,
    },
    /// Summarize a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn parse_subtask(s: &str) -> Result<Subtask, String> {
    s.parse()
}

/// Base, then config file, then flags (`--set` after named flags), then
/// environment.
fn resolve(base: RunConfig, cli_config: Option<&PathBuf>, set: &[String], flags: &RunFlags) -> Result<RunConfig> {
    let mut layers = Vec::new();
    if let Some(path) = cli_config {
        layers.extend(read_config_file(path)?);
    }
    layers.extend(flags.overrides());
    for s in set {
        layers.push(parse_set(s)?);
    }
    layers.extend(env_overrides());
    base.layered(&layers)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess { flags } => {
            let cfg = resolve(RunConfig::default(), cli.config.as_ref(), &cli.set, flags)?;
            let run = commands::preprocess(&cfg)?;
            println!("run: {}", run.display());
        }
        Command::Train { subtask, run, flags } => {
            let base = commands::run_config(run)?;
            let cfg = resolve(base, cli.config.as_ref(), &cli.set, flags)?;
            commands::train(&cfg, run, *subtask)?;
        }
        Command::Predict { run, text_dir, out } => {
            let out = out.clone().unwrap_or_else(|| run.join("predictions"));
            commands::predict(run, text_dir, &out)?;
        }
        Command::Evaluate {
            pred,
            gold,
            text_dir,
            groups,
            out,
        } => commands::evaluate(pred, gold, text_dir, groups.as_deref(), out)?,
        Command::Report { run } => commands::report(run)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
