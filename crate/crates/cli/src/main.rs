mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Failure, Run};
use config::{rates, RunConfig};

#[derive(Parser)]
#[command(name = "vatt", version, about = "Multimodal contrastive Transformer pre-training on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pre-training; writes a checkpoint and a metric stream.
    Pretrain(Common),
    /// Finite-difference check of every operation and the end-to-end loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Perturb every analytic gradient so the check must fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Analytical forward FLOPs per drop rate, as CSV.
    Flops(Common),
    /// Held-out similarity separation, retrieval, activation profile and
    /// embedding export.
    Eval(WithCheckpoint),
    /// Low-rank linear probe on frozen video features.
    Probe(WithCheckpoint),
    /// Writes a synthetic stream fixture.
    GenData(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to continue pre-training from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Comma-separated drop rates for `flops` and `gradcheck`.
    #[arg(long)]
    drop_rates: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Trained weights; an untrained model from the seed when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn threads() -> Result<usize, Failure> {
    match std::env::var("VATT_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(1)),
            _ => Err(Failure::Config(format!("VATT_THREADS: expected a positive integer, got `{v}`"))),
        },
    }
}

fn prepare(command: &'static str, c: &Common) -> Result<Run, Failure> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::parse("")?,
    };
    if let Some(s) = c.seed {
        cfg.seed = Some(s);
    }
    if let Some(r) = &c.drop_rates {
        let r = rates(r).map_err(|e| Failure::Config(format!("--drop-rates: {e}")))?;
        cfg.drop_rates = r.clone();
        cfg.gradcheck_drop_rates = r;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    cfg.seed()?;
    let run = Run { command, cfg, threads: threads()? };
    run.write_manifest()?;
    Ok(run)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain(c) => commands::pretrain(&prepare("pretrain", &c)?, c.resume.as_deref()),
        Command::Gradcheck { common, inject_fault } => commands::gradcheck(&prepare("gradcheck", &common)?, inject_fault),
        Command::Flops(c) => commands::flops(&prepare("flops", &c)?),
        Command::Eval(w) => commands::eval(&prepare("eval", &w.common)?, w.checkpoint.as_deref()),
        Command::Probe(w) => commands::probe(&prepare("probe", &w.common)?, w.checkpoint.as_deref()),
        Command::GenData(c) => commands::gen_data(&prepare("gen-data", &c)?),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code() as u8)
        }
    }
}
