use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use stegalift_cli::{exit_code, init_threads, Command, RunConfig};

#[derive(Parser)]
#[command(name = "stega-lift", version, about = "Forgery detection on steganographic images")]
struct Cli {
    command: Command,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; for `gen-data` this is where the dataset goes.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        match cli.command {
            Command::GenData => cfg.data_dir = out,
            Command::Eval => {
                cfg.checkpoint = Some(cfg.checkpoint_path());
                cfg.out_dir = out;
            }
            _ => cfg.out_dir = out,
        }
    }
    print!("{}", stegalift_cli::execute(cli.command, &cfg)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
