use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use axialseg::cli::{self, RunConfig};
use axialseg::Result;

#[derive(Parser)]
#[command(name = "axialseg", version, about = "Gated axial attention segmentation: data, training, checks and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic PGM corpus to --out.
    Gen(Common),
    /// Train on --corpus; writes metrics.txt and checkpoint.axsg to --out.
    Train(Common),
    /// Score a checkpoint on --corpus and write predicted masks to --out.
    Eval(Common),
    /// Finite-difference check of every op, a gated layer and the micro-MedT.
    Gradcheck(Common),
    /// Multiply-accumulate counts of full vs axial attention.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for model init, shuffling and data generation.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Finite-difference step for gradcheck.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Extra key=value settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut overrides: Vec<(&str, String)> = Vec::new();
        if let Some(s) = self.seed {
            overrides.push(("seed", s.to_string()));
            overrides.push(("data_seed", s.to_string()));
        }
        let paths = [("out", &self.out), ("checkpoint", &self.checkpoint), ("corpus", &self.corpus)];
        for (key, value) in paths {
            if let Some(p) = value {
                overrides.push((key, p.display().to_string()));
            }
        }
        if let Some(v) = &self.variant {
            overrides.push(("variant", v.clone()));
        }
        if let Some(e) = self.epochs {
            overrides.push(("epochs", e.to_string()));
        }
        if let Some(e) = self.eps {
            overrides.push(("gradcheck_eps", e.to_string()));
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| axialseg::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            overrides.push((k.trim(), v.trim().to_string()));
        }
        for (k, v) in overrides {
            cfg.set(k, &v)?;
        }
        Ok(cfg)
    }
}

fn run(command: Command, out: &mut dyn Write) -> Result<bool> {
    match command {
        Command::Gen(c) => cli::cmd_gen(&c.resolve()?, out).map(|_| true),
        Command::Train(c) => cli::cmd_train(&c.resolve()?, out).map(|_| true),
        Command::Eval(c) => cli::cmd_eval(&c.resolve()?, out).map(|_| true),
        Command::Gradcheck(c) => cli::cmd_gradcheck(&c.resolve()?, out).map(|s| s.passes()),
        Command::Bench(c) => cli::cmd_bench(&c.resolve()?, out).map(|_| true),
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(args.command, &mut out) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
