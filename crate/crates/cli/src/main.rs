//! `scar-lab`: generate corpora, train variants, evaluate, sweep and plot.
//!
//! Exit codes: 0 success, 2 usage or config, 3 missing dependency, 4 numeric
//! failure, 1 anything else.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scar_core::Error;

use commands::{cmd_eval, cmd_gen, cmd_sweep, cmd_train, LoadedRun, Mode, Outcome};
use config::RunConfig;

const THREADS_ENV: &str = "SCAR_LAB_THREADS";

#[derive(Parser)]
#[command(name = "scar-lab", version, about = "Adversarial token removal and compensation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to anything it omits.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train one variant; writes config snapshot, checkpoint and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory from `gen`; regenerated from the config if omitted.
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        #[arg(long, value_name = "NAME")]
        variant: Option<String>,
    },
    /// Evaluate a run directory.
    Eval {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// zeroshot, probe, cmrs or decompose.
        #[arg(long, value_name = "NAME")]
        mode: String,
        /// Results directory (defaults to the run directory).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
        /// Fixed masked-sample fraction for every evaluation mask.
        #[arg(long, value_name = "F")]
        budget: Option<f64>,
        /// Hard-mask candidate pool size.
        #[arg(long, value_name = "N")]
        candidates: Option<usize>,
    },
    /// Train and score a λ_cons × λ_mask grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        #[arg(long, value_name = "NAME")]
        variant: Option<String>,
    },
    /// Render token heat grids and loss curves as SVG.
    Plot {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Number of test records to draw.
        #[arg(long, default_value_t = 3)]
        records: usize,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Input(_) | Error::Format(_) | Error::Json(_) => 2,
        Error::Dependency(_) => 3,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn base_config(common: &Common) -> scar_core::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn with_training(mut cfg: RunConfig, corpus: Option<PathBuf>, variant: Option<String>) -> RunConfig {
    if corpus.is_some() {
        cfg.corpus_dir = corpus;
    }
    if let Some(v) = variant {
        cfg.variant = v;
    }
    cfg
}

fn run(cli: Cli) -> scar_core::Result<Outcome> {
    match cli.command {
        Command::Gen { common } => cmd_gen(&base_config(&common)?.resolve()?),
        Command::Train { common, corpus, variant } => {
            cmd_train(with_training(base_config(&common)?, corpus, variant).resolve()?)
        }
        Command::Sweep { common, corpus, variant } => {
            let (out, _) = cmd_sweep(with_training(base_config(&common)?, corpus, variant).resolve()?)?;
            Ok(out)
        }
        Command::Eval { run, mode, out, seed, budget, candidates } => {
            let mode: Mode = mode.parse()?;
            let mut loaded = LoadedRun::open(&run)?;
            if let Some(s) = seed {
                loaded.cfg.seed = s;
                loaded.cfg.eval.settings.seed = s;
            }
            if budget.is_some() {
                loaded.cfg.eval.settings.budget = budget;
            }
            if let Some(n) = candidates {
                loaded.cfg.eval.settings.candidates = n;
            }
            loaded.cfg = loaded.cfg.resolve_eval()?;
            cmd_eval(&loaded, mode, out.as_deref().unwrap_or(&run))
        }
        Command::Plot { run, out, records } => {
            let loaded = LoadedRun::open(&run)?;
            let dir = out.unwrap_or_else(|| run.join("plots"));
            plot::cmd_plot(&loaded, &dir, records)
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV}={value:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("thread pool: {e}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(out) => {
            print!("{}", out.summary);
            for f in &out.files {
                log::debug!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
