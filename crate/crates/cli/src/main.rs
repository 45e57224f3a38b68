use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdm_core::vocab::TaskKind;

mod artifact;
mod commands;
mod config;
mod error;

use config::ExperimentConfig;
use error::CliError;

/// Masked diffusion experiments at desk scale.
#[derive(Debug, Parser)]
#[command(name = "mdm", version)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set train.hyper.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory.
    #[arg(long, default_value = "mdm-out", global = true)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Corrupted views of sequences across the configured time grid.
    Corrupt {
        /// JSON array of token id arrays; toy corpus samples when absent.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the toy transformer and write a run record and checkpoint.
    Train {
        /// Also append the run record to this JSONL log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        tag: Option<String>,
    },
    /// Sample from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "text")]
        task: TaskKind,
        /// Comma-separated text payload ids.
        #[arg(long, value_delimiter = ',')]
        prompt: Vec<u32>,
        #[arg(long)]
        target_len: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Gradient variance under iid masking versus anti-masking.
    ProbeVariance {
        /// Probe a trained model instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Transfer the optimizer tuple to a new token horizon and batch size.
    SdeRescale {
        /// Target token horizon; the base horizon when absent.
        #[arg(long)]
        d: Option<f64>,
        /// Target batch size; the base batch when absent.
        #[arg(long)]
        b: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Critical step count and batch size from a set of runs.
    BcritScan {
        #[arg(long)]
        runs: PathBuf,
    },
    /// Fit the drift/horizon law and compare the optimal gamma forms.
    GammaSweep {
        /// CSV with columns s_tilde, b_tilde, loss; synthesized when absent.
        #[arg(long)]
        points: Option<PathBuf>,
    },
    /// Fit a loss law in model size and token count.
    FitScaling {
        /// CSV with columns n_nonembed, d_tokens, loss (billions).
        #[arg(long, conflicts_with = "runs")]
        input: Option<PathBuf>,
        /// JSONL run log.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
    /// Optimal token frontier, compute-optimal allocations and iso tables.
    Frontier {
        /// `fit.json` from fit-scaling; the planted law when absent.
        #[arg(long)]
        fit: Option<PathBuf>,
    },
    /// Paired compute-matched runs with and without anti-masking.
    AntimaskAblate {
        /// Also run the gradient variance probe on the shared initialization.
        #[arg(long)]
        probe: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Corrupt { .. } => "corrupt",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::ProbeVariance { .. } => "probe-variance",
            Command::SdeRescale { .. } => "sde-rescale",
            Command::BcritScan { .. } => "bcrit-scan",
            Command::GammaSweep { .. } => "gamma-sweep",
            Command::FitScaling { .. } => "fit-scaling",
            Command::Frontier { .. } => "frontier",
            Command::AntimaskAblate { .. } => "antimask-ablate",
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MDM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().map_err(|_| {
        CliError::Usage(format!(
            "MDM_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let mut overrides = cli.common.overrides.clone();
    if let Some(s) = cli.common.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = ExperimentConfig::load(cli.common.config.as_deref(), &overrides)?;
    let mut sink = artifact::ArtifactSink::open(
        &cli.common.out,
        artifact::Provenance::new(cli.command.name(), &cfg),
    )?;
    match cli.command {
        Command::Corrupt { input } => commands::corrupt(&cfg, input.as_deref(), &mut sink)?,
        Command::Train { log, tag } => commands::train(&cfg, log.as_deref(), tag, &mut sink)?,
        Command::Generate {
            checkpoint,
            task,
            prompt,
            target_len,
            count,
        } => commands::generate(
            &cfg,
            &checkpoint,
            task,
            &prompt,
            target_len,
            count,
            &mut sink,
        )?,
        Command::ProbeVariance { checkpoint } => {
            commands::probe_variance(&cfg, checkpoint.as_deref(), &mut sink)?
        }
        Command::SdeRescale { d, b, gamma } => commands::sde_rescale(&cfg, d, b, gamma, &mut sink)?,
        Command::BcritScan { runs } => commands::bcrit_scan(&cfg, &runs, &mut sink)?,
        Command::GammaSweep { points } => {
            commands::gamma_sweep(&cfg, points.as_deref(), &mut sink)?
        }
        Command::FitScaling { input, runs } => {
            commands::fit_scaling(&cfg, input.as_deref(), runs.as_deref(), &mut sink)?
        }
        Command::Frontier { fit } => commands::frontier(&cfg, fit.as_deref(), &mut sink)?,
        Command::AntimaskAblate { probe } => commands::antimask_ablate(&cfg, probe, &mut sink)?,
    }
    for p in sink.commit() {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mdm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
