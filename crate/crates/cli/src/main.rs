//! `viser`: saliency compilation, saliency-guided PAD training, open-set
//! evaluation and reporting from one experiment config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use viser_core::datamodel::AttackType;
use viser_core::evaluation::Method;
use viser_core::reporting::ReportFormat;

use crate::config::{parse_seeds, ConfigErrors};

pub const FIXTURE_CONFIG: &str = include_str!("../fixtures/viser.toml");

/// Set by Ctrl-C; workers finish their current run and stop taking new ones.
pub static CANCEL: AtomicBool = AtomicBool::new(false);

const EXIT_DATA: u8 = 1;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "viser", version, about = "Saliency-guided iris presentation attack detection experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(short, long, global = true, default_value = "viser.toml")]
    config: PathBuf,

    /// Overrides `output_root` from the config and VISER_OUTPUT_ROOT.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,

    /// Log filter, e.g. `info` or `viser_core=debug`. Defaults to VISER_LOG or `info`.
    #[arg(long, global = true)]
    log: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compile target saliency maps for one source (or `all` configured sources).
    CompileSaliency {
        source: String,
        /// Write per-session clustering labels (denoised gaze sources) as JSON lines.
        #[arg(long)]
        dump_labelings: Option<PathBuf>,
    },
    /// Train one model on a leave-one-attack-out split and save its checkpoint.
    Train {
        #[arg(long, default_value = "xent")]
        method: Method,
        #[arg(long)]
        attack: AttackType,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Extract (or complete the cached) embeddings for every sample.
    Embed {
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run the leave-one-attack-out protocol; completed runs are skipped.
    Eval(EvalArgs),
    /// Aggregate stored runs into delta tables.
    Report {
        #[arg(long, default_value = "xent")]
        baseline: Method,
        #[arg(long, default_value = "markdown")]
        format: ReportFormat,
        /// Only these methods (comma-separated); default all stored.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// Include runs produced under a different config fingerprint.
        #[arg(long)]
        force: bool,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write every run's ROC operating points to this CSV.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Check the config and every path it references.
    ValidateConfig,
    /// Write the synthetic fixture corpus and its config into a directory.
    Fixture {
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Methods (comma-separated or repeated); default from config.
    #[arg(long = "method", value_delimiter = ',')]
    methods: Vec<Method>,
    /// Held-out attacks (comma-separated); default all seven.
    #[arg(long, value_delimiter = ',')]
    attacks: Vec<AttackType>,
    /// `0..11` (inclusive), `0..=11`, or a comma list.
    #[arg(long, value_parser = seed_list)]
    seeds: Option<SeedList>,
    #[arg(long)]
    jobs: Option<usize>,
}

/// Wrapped so clap treats the list as one value.
#[derive(Clone, Debug)]
struct SeedList(Vec<u64>);

fn seed_list(s: &str) -> Result<SeedList, String> {
    parse_seeds(s).map(SeedList)
}

fn init_logging(filter: Option<&str>) {
    let filter = match filter {
        Some(f) => EnvFilter::new(f),
        None => EnvFilter::try_from_env("VISER_LOG").unwrap_or_else(|_| EnvFilter::new("info")),
    };
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_current_span(false)
        .init();
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors.
    let cli = Cli::parse();
    init_logging(cli.log.as_deref());
    if let Err(e) = ctrlc::set_handler(|| {
        if CANCEL.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        tracing::warn!("interrupt received; finishing in-flight runs (press again to abort)");
    }) {
        tracing::warn!(error = %e, "could not install Ctrl-C handler");
    }

    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            if let Some(c) = e.downcast_ref::<ConfigErrors>() {
                for f in &c.0 {
                    tracing::error!(field = %f.field, detail = %f.message, "config validation failed");
                }
            } else {
                let chain: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
                tracing::error!(error = %e, causes = ?chain, "command failed");
            }
            ExitCode::from(EXIT_DATA)
        }
    }
}
