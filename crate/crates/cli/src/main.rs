use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod parse;

/// Covariance analysis and steering for linear SDEs with input delay.
#[derive(Debug, Parser)]
#[command(name = "delaysteer", version)]
pub struct Cli {
    /// JSON system document.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory for CSV outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    /// Steps of the time grid used for synthesis and profiles.
    #[arg(long, global = true)]
    pub grid_steps: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LawChoice {
    Open,
    Lq,
    Steer,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Controllability report of the delayed Grammian.
    Check {
        #[arg(long, default_value_t = 32)]
        tau_samples: usize,
    },
    /// Threshold covariance profile on [h, T].
    SigmaMin {
        /// Weight for the scalar column, e.g. "1,0;0,0" (default identity).
        #[arg(long = "Q")]
        q: Option<String>,
    },
    /// Exact covariance steering to a terminal mean and covariance.
    Steer {
        #[arg(long)]
        target_cov: Option<String>,
        #[arg(long)]
        target_mean: Option<String>,
        #[arg(long = "R", default_value = "1")]
        r: String,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Finite-horizon LQ gains.
    Lq {
        #[arg(long = "Q")]
        q: Option<String>,
        #[arg(long = "G")]
        g: Option<String>,
        #[arg(long, default_value_t = 1e-6)]
        rho: f64,
    },
    /// Monte Carlo ensemble under a chosen law.
    Simulate {
        #[arg(long, value_enum, default_value = "open")]
        law: LawChoice,
        #[arg(long, default_value_t = 1000)]
        paths: usize,
        /// Step size; must divide h and T − h (default h/50).
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Paths written to paths.csv.
        #[arg(long, default_value_t = 10)]
        save_paths: usize,
        #[arg(long = "Q")]
        q: Option<String>,
        #[arg(long = "G")]
        g: Option<String>,
        #[arg(long, default_value_t = 1e-6)]
        rho: f64,
        #[arg(long)]
        target_cov: Option<String>,
        #[arg(long)]
        target_mean: Option<String>,
        #[arg(long = "R", default_value = "1")]
        r: String,
    },
    /// LQ cost against V_min over a decreasing list of rho.
    SweepRho {
        #[arg(long = "Q")]
        q: Option<String>,
        #[arg(long = "G")]
        g: Option<String>,
        #[arg(long, default_value = "1e-1,1e-2,1e-3,1e-4,1e-5,1e-6")]
        rhos: String,
    },
    /// Building temperature case study.
    Building {
        #[arg(long, default_value_t = delaysteer::building::DEFAULT_DELAY)]
        h: f64,
        #[arg(long, default_value_t = delaysteer::building::DEFAULT_HORIZON)]
        horizon: f64,
        #[arg(long, default_value_t = 1e-6)]
        rho: f64,
        #[arg(long, default_value_t = 2000)]
        paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2.0)]
        dt: f64,
        #[arg(long, default_value_t = 5)]
        stride: usize,
        #[arg(long, default_value_t = 20.0)]
        set_point: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
