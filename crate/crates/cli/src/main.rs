//! `vidcl`: pretraining, fine-tuning, evaluation and inspection from one binary.
//!
//! Configuration is layered: built-in defaults, then `--config`, then trailing
//! `KEY=VALUE` overrides, then flags such as `--seed`. Every command writes its
//! outputs and the effective `config.toml` into a run directory.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

mod commands;
mod overrides;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vidcl_core::RunConfig;

use crate::commands::BackboneSource;
use crate::overrides::{parse_pairs, split_grid, take_usize, UsageError};

#[derive(Debug, Parser)]
#[command(name = "vidcl", version, about = "Contrastive video pretraining with intra- and cross-video negatives")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` after all other configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Exact output directory (default: a fresh directory under --runs-root).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true, default_value = "runs")]
    runs_root: PathBuf,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the encoder; writes steplog.csv and checkpoints/.
    Pretrain {
        /// Also write mining.csv with the selected top-n queue entries per anchor.
        #[arg(long)]
        log_mining: bool,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Cross-validate fine-tuning (metrics.csv) and save a classifier trained on all labels.
    Finetune {
        /// Pretraining checkpoint whose backbone initializes the classifier.
        #[arg(long, required_unless_present = "random_backbone")]
        checkpoint: Option<PathBuf>,
        /// Start from a randomly initialized backbone instead.
        #[arg(long, conflicts_with = "checkpoint")]
        random_backbone: bool,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a saved classifier on the labeled set.
    Evaluate {
        #[arg(long)]
        classifier: PathBuf,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write the synthetic corpus (PNG frames + manifest) and labeled set to disk.
    GenSynthetic {
        /// Output directory (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print sampler supports and empirical histograms for a video of M frames.
    InspectSampler {
        /// Exclusion zone Δ (default: sampler.delta_low).
        #[arg(long)]
        exclusion: Option<usize>,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        /// `M=<frames>` plus any KEY=VALUE overrides.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print the (epoch → phase, Δ) schedule for a video of M frames.
    InspectCurriculum {
        /// `M=<frames>` plus any KEY=VALUE overrides.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Pretrain and cross-validate at every point of a grid, e.g. `k=1,3,5 n=2,4 N=66,96`.
    Sweep {
        /// Grid points run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(value_name = "KEY=V1,V2,..")]
        overrides: Vec<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::GenSynthetic { .. } => "gen-synthetic",
            Command::InspectSampler { .. } => "inspect-sampler",
            Command::InspectCurriculum { .. } => "inspect-curriculum",
            Command::Sweep { .. } => "sweep",
        }
    }

    fn overrides(&self) -> &[String] {
        match self {
            Command::Pretrain { overrides, .. }
            | Command::Finetune { overrides, .. }
            | Command::Evaluate { overrides, .. }
            | Command::GenSynthetic { overrides, .. }
            | Command::InspectSampler { overrides, .. }
            | Command::InspectCurriculum { overrides }
            | Command::Sweep { overrides, .. } => overrides,
        }
    }
}

fn load_config(global: &Global, pairs: &[(String, String)]) -> anyhow::Result<RunConfig> {
    let mut pairs = pairs.to_vec();
    if let Some(seed) = global.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    // Unreadable or malformed config files count as configuration errors too.
    RunConfig::load(global.config.as_deref(), &pairs).map_err(|e| match e.is_config() {
        true => e.into(),
        false => UsageError(e.to_string()).into(),
    })
}

fn frames_arg(pairs: &mut Vec<(String, String)>) -> anyhow::Result<usize> {
    match take_usize(pairs, "M")? {
        Some(m) if m >= 1 => Ok(m),
        Some(_) => Err(UsageError("`M` must be ≥ 1".into()).into()),
        None => Err(UsageError("missing `M=<frames>`".into()).into()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let name = cli.command.name();
    let mut pairs = parse_pairs(cli.command.overrides())?;
    let create = |cfg: &RunConfig| rundir::create(g.run_dir.as_deref(), &g.runs_root, name, cfg);
    match &cli.command {
        Command::Pretrain { log_mining, resume, .. } => {
            if *log_mining {
                pairs.push(("trainer.log_mining".into(), "true".into()));
            }
            let cfg = load_config(g, &pairs)?;
            let dir = create(&cfg)?;
            commands::pretrain(&cfg, &dir, resume.as_deref())
        }
        Command::Finetune {
            checkpoint,
            random_backbone,
            ..
        } => {
            let cfg = load_config(g, &pairs)?;
            let dir = create(&cfg)?;
            let source = match (checkpoint, random_backbone) {
                (Some(c), false) => BackboneSource::Checkpoint(c),
                _ => BackboneSource::Random,
            };
            commands::finetune_cmd(&cfg, &dir, source)
        }
        Command::Evaluate { classifier, .. } => {
            let cfg = load_config(g, &pairs)?;
            let dir = create(&cfg)?;
            commands::evaluate_cmd(&cfg, &dir, classifier)
        }
        Command::GenSynthetic { out, .. } => {
            let cfg = load_config(g, &pairs)?;
            let dir = create(&cfg)?;
            commands::gen_synthetic(&cfg, out.as_deref().unwrap_or(&dir))
        }
        Command::InspectSampler { exclusion, draws, .. } => {
            let frames = frames_arg(&mut pairs)?;
            let cfg = load_config(g, &pairs)?;
            let dir = create(&cfg)?;
            let exclusion = exclusion.unwrap_or(cfg.sampler.delta_low);
            print!("{}", commands::inspect_sampler(&cfg, &dir, frames, exclusion, *draws)?);
            Ok(())
        }
        Command::InspectCurriculum { .. } => {
            let frames = frames_arg(&mut pairs)?;
            let cfg = load_config(g, &pairs)?;
            let dir = create(&cfg)?;
            print!("{}", commands::inspect_curriculum(&cfg, &dir, frames)?);
            Ok(())
        }
        Command::Sweep { jobs, .. } => {
            let (axes, fixed) = split_grid(pairs)?;
            let base = load_config(g, &fixed)?;
            let dir = create(&base)?;
            let load = |point: &[(String, String)]| {
                let mut all = fixed.clone();
                all.extend_from_slice(point);
                load_config(g, &all)
            };
            print!("{}", commands::sweep(load, &axes, &dir, *jobs)?);
            Ok(())
        }
    }
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<UsageError>()
            || e.downcast_ref::<vidcl_core::Error>()
                .is_some_and(vidcl_core::Error::is_config)
    })
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    init_logging(cli.global.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_config_error(&err) { 1 } else { 2 })
        }
    }
}
