use std::path::PathBuf;
use std::process::ExitCode;

use bagforge::pipeline::{Pipeline, PipelineConfig, Stage, SEED_ENV};
use bagforge::{io, Error, Result};
use clap::{Parser, ValueEnum};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Kb,
    Corpus,
    Match,
    Link,
    Tag,
    Bags,
    Split,
    Train,
    Eval,
    Synth,
    All,
}

/// Distant-supervision relation extraction: KB + corpus in, ranked triples out.
#[derive(Debug, Parser)]
#[command(name = "bagforge", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    agg: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let file = cli.config.as_deref().map(io::read_json).transpose()?;
    let mut overrides = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        overrides.push((k.to_string(), v.to_string()));
    }
    let flags = [
        ("scheme", cli.scheme.clone()),
        ("aggregation", cli.agg.clone()),
        ("workers", cli.workers.map(|w| w.to_string())),
        ("work_dir", cli.work_dir.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            // Quote so values like `k-tag` or paths stay strings.
            let v = if k == "workers" { v } else { serde_json::to_string(&v)? };
            overrides.push((k.to_string(), v));
        }
    }
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(s) => {
            Some(s.parse::<u64>().map_err(|_| Error::Config(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?)
        }
        Err(_) => None,
    };
    PipelineConfig::resolve(file, &overrides, cli.seed.or(env_seed))
}

fn run(cli: &Cli) -> Result<()> {
    let pipeline = Pipeline::new(config(cli)?)?;
    let stages: Vec<Stage> = match cli.command {
        Command::All => Stage::ALL.to_vec(),
        Command::Kb => vec![Stage::Kb],
        Command::Corpus => vec![Stage::Corpus],
        Command::Match => vec![Stage::Match],
        Command::Link => vec![Stage::Link],
        Command::Tag => vec![Stage::Tag],
        Command::Bags => vec![Stage::Bags],
        Command::Split => vec![Stage::Split],
        Command::Train => vec![Stage::Train],
        Command::Eval => vec![Stage::Eval],
        Command::Synth => vec![Stage::Synth],
    };
    for s in stages {
        let stats = pipeline.run(s)?;
        println!("{}\t{}", s.name(), serde_json::to_string(&stats)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
