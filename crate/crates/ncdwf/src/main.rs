use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use ncdwf::config::{Ablation, RunConfig, DEFAULT_PRESET};
use ncdwf::pipeline::{self, PhaseSelect};
use ncdwf::{Error, Result};

/// Novel class discovery without forgetting on feature-vector data.
#[derive(Parser)]
#[command(name = "ncdwf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or split) a dataset and write the four split CSVs.
    Generate(Common),
    /// Run phase 1, phase 2, or both on the dataset in the data directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// 1, 2 or all.
        #[arg(long, default_value = "all")]
        phase: String,
        /// Disable one component: no-plr, no-mir or no-fd.
        #[arg(long)]
        ablate: Option<String>,
        /// Overrides the epoch count of every phase being run.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write task-aware and generalized reports plus predictions.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to phase2.ckpt (or phase1.ckpt) under --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generalized accuracy across the configured thresholds.
    SweepTau {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated thresholds replacing eval.taus.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
    },
    /// Train the full method and every single-component ablation.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// TOML file laid over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = DEFAULT_PRESET)]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.preset, self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            for f in pipeline::cmd_generate(&c.resolve()?)? {
                println!("{}", f.display());
            }
        }
        Command::Train { common, phase, ablate, epochs } => {
            let phase = PhaseSelect::parse(&phase)?;
            let mut cfg = common.resolve()?;
            if let Some(a) = ablate {
                cfg.apply_ablation(Ablation::parse(&a)?);
            }
            if let Some(e) = epochs {
                if phase != PhaseSelect::Two {
                    cfg.phase1.epochs = e;
                }
                if phase != PhaseSelect::One {
                    cfg.phase2.epochs = e;
                }
            }
            for f in pipeline::cmd_train(&cfg, phase)? {
                println!("{}", f.display());
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let ckpt = checkpoint.unwrap_or_else(|| pipeline::default_checkpoint(&cfg));
            let ev = pipeline::cmd_eval(&cfg, &ckpt)?;
            println!("{}", serde_json::to_string_pretty(&ev)?);
        }
        Command::SweepTau { common, checkpoint, taus } => {
            let mut cfg = common.resolve()?;
            if let Some(t) = taus {
                cfg.eval.taus = t;
                cfg.validate()?;
            }
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join(ncdwf::report::PHASE2_CKPT));
            let sweep = pipeline::cmd_sweep_tau(&cfg, &ckpt)?;
            println!("{:>8} {:>8} {:>8} {:>8}", "tau", "lab", "unlab", "all");
            for i in 0..sweep.taus.len() {
                println!(
                    "{:>8} {:>8.4} {:>8.4} {:>8.4}",
                    sweep.taus[i], sweep.lab_acc[i], sweep.unlab_acc[i], sweep.all_acc[i]
                );
            }
            println!("kci auc {:.4}", sweep.kci_auc);
        }
        Command::Ablate(c) => {
            let report = pipeline::cmd_ablate(&c.resolve()?)?;
            println!("{:>8} {:>8} {:>8} {:>8}", "variant", "lab", "unlab", "auc");
            for r in &report.rows {
                println!(
                    "{:>8} {:>8.4} {:>8.4} {:>8.4}",
                    r.variant, r.task_aware.lab_acc, r.task_aware.unlab_acc, r.kci_auc
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NCDWF_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
