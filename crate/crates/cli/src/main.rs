mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "paf", version, about = "Parametric activations and adversarial robustness at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write checkpoint, history and report.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Activation-parameter or regularization-strength sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Attack a checkpoint on the test split.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Export activation curves for a parameter grid or a checkpoint.
    Shapes {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        shapes: ShapeArgs,
    },
    /// Empirical Lipschitz estimate of a checkpoint.
    Lipschitz {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full robustness report of a checkpoint.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttackName {
    #[value(name = "fgsm")]
    Fgsm,
    #[value(name = "pgd_linf")]
    PgdLinf,
    #[value(name = "pgd_l2")]
    PgdL2,
    #[value(name = "square_search")]
    SquareSearch,
    #[value(name = "min_radius")]
    MinRadius,
    #[value(name = "ensemble")]
    Ensemble,
}

#[derive(Args, Clone)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "pgd_linf")]
    pub attack: AttackName,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
}

#[derive(Args, Clone)]
pub struct ShapeArgs {
    /// Export the learned activation of this checkpoint instead of a grid.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<String>,
    /// Which parameter the values vary: alpha or beta.
    #[arg(long)]
    pub param: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    /// Fixed alpha when sweeping beta.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fixed beta when sweeping alpha.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lo: Option<f64>,
    #[arg(long)]
    pub hi: Option<f64>,
    #[arg(long)]
    pub points: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common } => commands::train(&common),
        Command::Sweep { common } => commands::sweep(&common),
        Command::Attack { common, attack } => commands::attack(&common, &attack),
        Command::Shapes { common, shapes } => commands::shapes(&common, &shapes),
        Command::Lipschitz { common, checkpoint } => commands::lipschitz(&common, &checkpoint),
        Command::Report { common, checkpoint } => commands::report(&common, &checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
