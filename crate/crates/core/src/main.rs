use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fedtop::cli::experiment::{self, DATA_DIR_ENV};
use fedtop::cli::{parse_config, ExperimentConfig, ExperimentError};
use fedtop::data::{synth_sparse_logistic, SynthLabels};
use fedtop::fedsim::VariantKind;
use fedtop::numkit::RngStream;

#[derive(Parser)]
#[command(
    name = "fedtop",
    version,
    about = "Federated consensus ADMM experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Worker threads for client updates (0 = one per core).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Directory holding the MNIST IDX files.
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and emit per-round metrics as CSV.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record elapsed wall time in the wall_ms column.
        #[arg(long)]
        wall_clock: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run several algorithms on the same data and summarize rounds to
    /// target accuracy.
    Compare {
        /// One or more configuration files.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        /// Comma-separated algorithms to run with the first configuration.
        #[arg(long, value_delimiter = ',')]
        algorithms: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic sparse logistic dataset as CSV (label then features).
    GenSynth {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 20_000)]
        d: usize,
        #[arg(long, default_value_t = 0.1)]
        density: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = LabelRule::Bernoulli)]
        labels: LabelRule,
        #[arg(long, default_value_t = 0.1)]
        noise_var: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelRule {
    Bernoulli,
    Sign,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, String> {
    match path {
        None => parse_config("").map_err(|e| e.to_string()),
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?;
            parse_config(&text).map_err(|e| format!("{}: {e}", p.display()))
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), ExperimentError> {
    match out {
        Some(p) => experiment::write_text(p, text),
        None => experiment::write_stdout(text),
    }
}

fn main_inner(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run {
            config,
            out,
            wall_clock,
            common,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.wall_clock |= wall_clock;
            let rows = experiment::run_experiment(&cfg, common.data_dir.as_deref(), common.workers)
                .map_err(|e| e.to_string())?;
            emit(out.as_deref(), &experiment::metrics_csv(&rows)).map_err(|e| e.to_string())
        }
        Command::Compare {
            config,
            algorithms,
            out,
            common,
        } => {
            let mut configs = config
                .iter()
                .map(|p| load_config(Some(p)))
                .collect::<Result<Vec<_>, _>>()?;
            if !algorithms.is_empty() {
                let base = configs[0].clone();
                configs = algorithms
                    .iter()
                    .map(|name| {
                        let kind = VariantKind::from_name(name.trim())
                            .ok_or_else(|| format!("unknown algorithm `{name}`"))?;
                        Ok(ExperimentConfig {
                            algorithm: kind,
                            ..base.clone()
                        })
                    })
                    .collect::<Result<_, String>>()?;
            }
            let summary = experiment::compare_suite(
                &configs,
                Some(&out),
                common.data_dir.as_deref(),
                common.workers,
            )
            .map_err(|e| e.to_string())?;
            experiment::write_stdout(&summary.to_csv()).map_err(|e| e.to_string())
        }
        Command::GenSynth {
            n,
            d,
            density,
            seed,
            labels,
            noise_var,
            out,
        } => {
            let rule = match labels {
                LabelRule::Bernoulli => SynthLabels::Bernoulli,
                LabelRule::Sign => SynthLabels::Sign { noise_var },
            };
            let synth =
                synth_sparse_logistic(n, d, density, rule, &mut RngStream::new(seed, "synthetic"))
                    .map_err(|e| e.to_string())?;
            let a = &synth.data.features;
            let mut text = String::new();
            for j in 0..a.cols() {
                let _ = write!(text, "{}", synth.data.labels[j]);
                for i in 0..a.rows() {
                    let _ = write!(text, ",{:.16e}", a.get(i, j));
                }
                text.push('\n');
            }
            emit(out.as_deref(), &text).map_err(|e| e.to_string())
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
