mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::UsageError;

#[derive(Parser, Debug)]
#[command(name = "ruackit", version, about = "Synthetic benchmarks, adversarial calibration training and uncertainty evaluation")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set gamma=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Worker threads for evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Dirs {
    /// Benchmark directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub run: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a benchmark.
    Gen {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a head on the benchmark's training split.
    Train {
        #[command(flatten)]
        dirs: Dirs,
    },
    /// Evaluate a trained checkpoint on the source and shifted domains.
    Eval {
        #[command(flatten)]
        dirs: Dirs,
        /// Comma-separated MC sample counts; more than one writes a sweep table.
        #[arg(long, value_delimiter = ',')]
        mc_samples: Vec<usize>,
        /// Apply uncertainty-guided mask correction before scoring.
        #[arg(long)]
        unc_corr: bool,
        /// Output directory (default: <run>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the attackers' adversarial views for a few validation scenes.
    AttackPreview {
        #[command(flatten)]
        dirs: Dirs,
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Output directory (default: <run>/attack_preview).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply uncertainty-guided correction to predictions and score both versions.
    Correct {
        #[command(flatten)]
        dirs: Dirs,
        /// Output directory (default: <run>/correct).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paired per-domain comparison of two evaluated runs (b against a).
    Report {
        a: PathBuf,
        b: PathBuf,
        /// Metrics to compare.
        #[arg(long, value_delimiter = ',', default_value = "jf,pavpu,aurc,ece,auroc_pixel")]
        metrics: Vec<String>,
        /// Directory for report.json and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
