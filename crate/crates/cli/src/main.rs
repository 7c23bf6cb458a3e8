use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aird_cli::{cmd_eval, cmd_index, cmd_synth, cmd_train, format_retrieval, Layout, RunConfig, UsageError};

#[derive(Parser)]
#[command(name = "aird", about = "Image repurposing detection pipeline")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for inputs and outputs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark and split it.
    Synth,
    /// Build the retrieval index over the train split.
    Index,
    /// Train the detector; `--set train.mode=nad` trains the ablation.
    Train,
    /// Evaluate detectors and baselines on the test split.
    Eval,
    /// Print the merged configuration.
    Config,
}

fn config(cli: &Cli) -> Result<RunConfig, UsageError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for a in &cli.set {
        cfg.apply_assignment(a)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = config(cli)?;
    let layout = Layout::new(&cli.out);
    match cli.command {
        Command::Synth => print!("{}", cmd_synth(&cfg, &layout)?),
        Command::Index => {
            let (idx, m) = cmd_index(&cfg, &layout)?;
            println!("indexed {} packages in {} lists", idx.len(), idx.nlist());
            print!("{}", format_retrieval(&m));
        }
        Command::Train => print!("{}", cmd_train(&cfg, &layout)?),
        Command::Eval => print!("{}", cmd_eval(&cfg, &layout)?.to_table()),
        Command::Config => print!("{}", cfg.render()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
