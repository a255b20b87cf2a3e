use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use strep::bench::AblationVariant;
use strep::cli::{self, Overrides};
use strep::data::Split;
use strep::error::{Error, Result};

#[derive(Parser)]
#[command(name = "strep", version, about = "Spatiotemporal representation pretraining toolkit")]
struct Cli {
    /// Run configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset container and print its statistics.
    Generate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Convert a headerless CSV (rows = time, columns = nodes) instead of
        /// synthesizing; calendar cadence comes from [data] steps_per_day.
        #[arg(long)]
        from_csv: Option<PathBuf>,
    },
    /// Pretrain on a dataset container.
    Pretrain {
        /// Dataset container path.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sweep the loss-weight grid and keep the best pair by validation
        /// loss (trains one model per pair).
        #[arg(long)]
        search_weights: bool,
    },
    /// Encode one split of a dataset into a representation store.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which split to encode: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit ridge probes on representations and report MSE/MAE vs baselines.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated forecast horizons, e.g. 12,24.
        #[arg(long)]
        horizons: Option<String>,
        /// Training-row sample fraction in (0, 1].
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Measure encoder runtime scaling against the all-pairs reference.
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated node counts, e.g. 128,256,512.
        #[arg(long)]
        n_list: Option<String>,
    },
    /// Train and evaluate the component ablation variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variant tags (default: all five).
        #[arg(long)]
        variants: Option<String>,
    },
}

fn parse_usize_list(text: &str, what: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad {what} entry '{v}'")))
        })
        .collect()
}

fn out_root(dir: PathBuf) -> PathBuf {
    match std::env::var_os("STREP_OUT_ROOT") {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

fn run(args: Cli) -> Result<()> {
    if let Some(workers) = std::env::var_os("STREP_WORKERS") {
        let workers: usize = workers
            .to_string_lossy()
            .parse()
            .map_err(|_| Error::Config("STREP_WORKERS must be an integer".to_string()))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    }

    let mut overrides = Overrides {
        seed: args.seed,
        ..Overrides::default()
    };
    match args.command {
        Command::Generate { out, from_csv } => {
            let cfg = cli::load_config(args.config.as_deref(), &overrides)?;
            cli::cmd_generate(&cfg, from_csv.as_deref(), &out_root(out), args.force)
        }
        Command::Pretrain {
            data,
            out,
            search_weights,
        } => {
            let cfg = cli::load_config(args.config.as_deref(), &overrides)?;
            cli::cmd_pretrain(&cfg, &data, &out_root(out), args.force, search_weights)
        }
        Command::Encode {
            checkpoint,
            data,
            split,
            out,
        } => {
            let split = Split::parse(&split).map_err(|e| Error::Config(e.to_string()))?;
            cli::cmd_encode(&checkpoint, &data, split, &out_root(out), args.force)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            horizons,
            fraction,
        } => {
            if let Some(h) = horizons {
                overrides.horizons = Some(parse_usize_list(&h, "horizon")?);
            }
            overrides.fraction = fraction;
            let cfg = cli::load_config(args.config.as_deref(), &overrides)?;
            cli::cmd_eval(&cfg, &checkpoint, &data, &out_root(out), args.force)
        }
        Command::Bench { out, n_list } => {
            if let Some(n) = n_list {
                overrides.n_list = Some(parse_usize_list(&n, "node count")?);
            }
            let cfg = cli::load_config(args.config.as_deref(), &overrides)?;
            cli::cmd_bench(&cfg, &out_root(out), args.force)
        }
        Command::Ablate { data, out, variants } => {
            let cfg = cli::load_config(args.config.as_deref(), &overrides)?;
            let variants = match variants {
                Some(list) => list
                    .split(',')
                    .map(|v| AblationVariant::parse(v.trim()))
                    .collect::<Result<Vec<_>>>()?,
                None => AblationVariant::ALL.to_vec(),
            };
            cli::cmd_ablate(&cfg, &data, &out_root(out), args.force, &variants)
        }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
