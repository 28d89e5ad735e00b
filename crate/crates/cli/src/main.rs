//! `degfairgt`: pretrain, embed, evaluate, ablate and synth commands.
//!
//! Exit status is 0 on success, 1 for invalid input (bad flags, config or
//! data files) and 2 for runtime failures (non-finite loss, I/O).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use degfairgt_core::pipeline::{self, EmbeddingSource, CHECKPOINT_FILE};
use degfairgt_core::RunConfig;

const THREADS_ENV: &str = "DEGFAIRGT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "degfairgt", version, about = "Degree-fair graph transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (DEGFAIRGT_THREADS takes precedence).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train the encoder; writes model.ckpt and loss.csv.
    Pretrain(Common),
    /// Export eval-mode embeddings from a checkpoint.
    Embed {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write one sampled augmented graph as an edge list.
        #[arg(long)]
        dump_augmented: Option<PathBuf>,
    },
    /// Score a checkpoint or an embeddings CSV; writes report.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "embeddings")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Train and evaluate all four augmentation × attention cells.
    Ablate(Common),
    /// Write the configured synthetic graph as dataset files.
    Synth(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Pretrain(c) | Command::Ablate(c) | Command::Synth(c) => c,
            Command::Embed { common, .. } | Command::Evaluate { common, .. } => common,
        }
    }
}

/// An error the user can fix by changing flags, config or inputs.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Invalid(format!("{THREADS_ENV}={v:?} is not a positive integer")).into()),
        },
        Err(_) => match flag {
            Some(0) => Err(Invalid("--threads must be positive".into()).into()),
            other => Ok(other),
        },
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(out) = &c.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    if let Some(n) = thread_count(common.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = load_config(common)?;
    match &cli.command {
        Command::Pretrain(_) => {
            let a = pipeline::cmd_pretrain(&cfg)?;
            let h = &a.trainer.history;
            if let (Some(first), Some(last)) = (h.first(), h.last()) {
                println!("loss {:.6} -> {:.6} over {} epochs", first.total, last.total, h.len());
            }
            println!("wrote {}", a.checkpoint.display());
            println!("wrote {}", a.loss_csv.display());
        }
        Command::Embed {
            checkpoint,
            dump_augmented,
            ..
        } => {
            let ck = checkpoint.clone().unwrap_or_else(|| cfg.output.join(CHECKPOINT_FILE));
            let path = pipeline::cmd_embed(&cfg, &ck, dump_augmented.as_deref())?;
            println!("wrote {}", path.display());
            if let Some(d) = dump_augmented {
                println!("wrote {}", d.display());
            }
        }
        Command::Evaluate {
            checkpoint,
            embeddings,
            ..
        } => {
            let source = match (checkpoint, embeddings) {
                (_, Some(e)) => EmbeddingSource::Embeddings(e.clone()),
                (Some(c), None) => EmbeddingSource::Checkpoint(c.clone()),
                (None, None) => EmbeddingSource::Checkpoint(cfg.output.join(CHECKPOINT_FILE)),
            };
            let (report, path) = pipeline::cmd_evaluate(&cfg, &source)?;
            for m in &report.metrics {
                println!("{:<22} {:>10.4} ± {:.4}", m.name, m.mean, m.std);
            }
            println!("wrote {}", path.display());
        }
        Command::Ablate(_) => {
            let results = pipeline::cmd_ablate(&cfg)?;
            for (cell, report) in &results {
                let acc = report.mean("accuracy").unwrap_or(f64::NAN);
                println!("{:<18} accuracy {acc:.4}", cell.name());
            }
            println!("wrote {}", cfg.output.join("ablation").display());
        }
        Command::Synth(_) => {
            if cfg.synthetic.is_none() {
                bail!(Invalid("the synth command needs a `synthetic` section".into()));
            }
            let a = pipeline::cmd_synth(&cfg)?;
            for p in [a.edges, a.features, a.labels] {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match err.downcast_ref::<degfairgt_core::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
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
