//! Command-line front end for the `agfusion` library.

pub mod ablate;
pub mod bench;
pub mod config;
pub mod exit;
pub mod fuse;
pub mod gradcheck;
pub mod tools;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_list, parse_strategies, RunConfig};
use crate::exit::classify;

#[derive(Debug, Parser)]
#[command(name = "agf", version, about = "Adaptive gated BEV fusion: run, check, benchmark, ablate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: config `out_dir`, else `agf-out`).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse a camera and a LiDAR tensor file with stored weights.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cam: PathBuf,
        #[arg(long)]
        lidar: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Replace the learned gate with a constant.
        #[arg(long)]
        fixed_gate: Option<f64>,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Relative-error tolerance.
        #[arg(long)]
        tol: Option<f64>,
        /// Corrupt the backward pass of this op kind (harness self-test).
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
        /// Factor applied to the faulty backward pass.
        #[arg(long, default_value_t = 1.01)]
        fault_scale: f64,
    },
    /// Analytic vs counted attention MACs, windowed and global.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated map extents; all (H, W) pairs are run.
        #[arg(long)]
        sizes: Option<String>,
        /// Comma-separated window sizes.
        #[arg(long)]
        windows: Option<String>,
    },
    /// Train and compare fusion strategies on the degradation benchmark.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated strategies, e.g. `conv_fuser,fixed_0.5,adaptive`.
        #[arg(long)]
        strategies: Option<String>,
        /// Overrides the configured number of training steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write initialized pipeline weights.
    Init {
        #[command(flatten)]
        common: Common,
        /// Weights file to write (default: `<out-dir>/weights.agw`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write all-zero branches instead of a random initialization.
        #[arg(long)]
        zero: bool,
    },
    /// Write one benchmark scene as tensor files.
    Scene {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// Draw from the holdout stream.
        #[arg(long)]
        holdout: bool,
    },
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        cfg.out_dir(self.out_dir.as_deref())
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match &cli.command {
        Command::Fuse {
            common,
            cam,
            lidar,
            weights,
            fixed_gate,
        } => {
            let cfg = common.load()?;
            let out_dir = common.out_dir(&cfg);
            let args = fuse::FuseArgs {
                cam,
                lidar,
                weights,
                out_dir: &out_dir,
                fixed_gate: *fixed_gate,
            };
            fuse::run(&cfg, &args, out)?;
        }
        Command::Gradcheck {
            common,
            tol,
            inject_fault,
            fault_scale,
        } => {
            let cfg = common.load()?;
            let fault = inject_fault
                .as_deref()
                .map(|op| gradcheck::parse_fault(op, *fault_scale))
                .transpose()?;
            gradcheck::run(&cfg, *tol, fault, &common.out_dir(&cfg), out)?;
        }
        Command::Bench { common, sizes, windows } => {
            let cfg = common.load()?;
            let sizes = match sizes {
                Some(s) => parse_list("sizes", s)?,
                None => cfg.bench.sizes.clone(),
            };
            let windows = match windows {
                Some(s) => parse_list("windows", s)?,
                None => cfg.bench.windows.clone(),
            };
            bench::run(&cfg, &sizes, &windows, &common.out_dir(&cfg), out)?;
        }
        Command::Ablate {
            common,
            strategies,
            steps,
        } => {
            let mut cfg = common.load()?;
            if let Some(n) = steps {
                cfg.experiment.train_steps = *n;
            }
            let list = match strategies {
                Some(s) => parse_strategies(s.split(','))?,
                None => cfg.strategies()?,
            };
            let threads = std::env::var(ablate::THREADS_ENV).ok();
            let workers = ablate::worker_count(threads.as_deref(), list.len())?;
            ablate::run(&cfg, &list, workers, &common.out_dir(&cfg), out)?;
        }
        Command::Init { common, out: path, zero } => {
            let cfg = common.load()?;
            let path = path.clone().unwrap_or_else(|| common.out_dir(&cfg).join("weights.agw"));
            tools::init(&cfg, *zero, &path, out)?;
        }
        Command::Scene { common, index, holdout } => {
            let cfg = common.load()?;
            tools::scene(&cfg, *index, *holdout, &common.out_dir(&cfg), out)?;
        }
        Command::Config { common } => {
            let cfg = common.load()?;
            write!(out, "{}", cfg.to_toml())?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return e.exit_code();
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            classify(&e).code()
        }
    }
}
