//! Command-line interface. Exit codes: 0 success, 1 operational error,
//! 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use super::backtest::{backtest, BacktestReport};
use super::checkpoint::{load_checkpoint, load_checkpoint_for};
use super::config::RunConfig;
use super::pipeline::{fit_sigma, load_market, split_dataset, train_variant};
use super::report::{aggregate, write_report_csv};
use crate::marketdata::{load_bars, simulate_market, write_bars, write_bars_with_sigma, Frequency};
use crate::policy::VariantConfig;

#[derive(Debug, Parser)]
#[command(name = "mctg", version, about = "Multi-frequency PPO trading agent with GARCH volatility features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set ppo.total_steps=4096.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Segment {
    Train,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic five-minute bar CSV.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Trading days to generate.
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit rolling GARCH(1,1) and write daily bars with a sigma column.
    FitGarch {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a variant with PPO; writes train_log.csv and checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sigma: Option<PathBuf>,
        /// DNN, DNN-GARCH, MCT or MCTG.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        total_steps: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Backtest a checkpoint; writes metrics.json, equity.csv and trajectory.csv.
    Backtest {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sigma: Option<PathBuf>,
        /// Expected variant; checked against the checkpoint.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        symbol: Option<String>,
        #[arg(long, value_enum, default_value = "test")]
        segment: Segment,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Aggregate backtest metrics.json files into a variant x {PR, TR} CSV.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenerateData { config, seed, days, out } => {
            let cfg = config.load()?;
            let n_days = days.unwrap_or(cfg.n_days);
            let series = simulate_market(&cfg.generator, n_days, seed.unwrap_or(cfg.seed))?;
            write_bars(&out, &series)?;
            println!("wrote {} bars ({n_days} days) to {}", series.len(), out.display());
        }
        Command::FitGarch { config, data, out } => {
            let cfg = config.load()?;
            let five = load_bars(&data, Frequency::FiveMin)?;
            let (daily, forecast) = fit_sigma(&five, &cfg)?;
            for w in &forecast.warnings {
                eprintln!("warning: {w}");
            }
            write_bars_with_sigma(&out, &daily, &forecast.sigma)?;
            println!("wrote {} daily sigmas from {} fits to {}", forecast.sigma.len(), forecast.fits.len(), out.display());
        }
        Command::Train {
            config,
            data,
            sigma,
            variant,
            seed,
            total_steps,
            out_dir,
        } => {
            let mut cfg = config.load()?;
            if let Some(v) = variant {
                cfg.variant = VariantConfig::from_name(&v)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = total_steps {
                cfg.ppo.total_steps = t;
            }
            let ds = load_market(&data, sigma.as_deref(), &cfg)?;
            let splits = split_dataset(&ds, &cfg)?;
            create_dir(&out_dir)?;
            let outcome = train_variant(&splits.train, &splits.norm, &cfg, Some(&out_dir))?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "{}: {} updates, {} steps, last mean episode reward {}",
                    cfg.variant.name(),
                    last.update,
                    last.steps,
                    last.mean_ep_reward
                );
            }
        }
        Command::Backtest {
            config,
            checkpoint,
            data,
            sigma,
            variant,
            symbol,
            segment,
            out_dir,
        } => {
            let enforce = variant.is_some() || config.config.is_some();
            let mut cfg = config.load()?;
            if let Some(v) = variant {
                cfg.variant = VariantConfig::from_name(&v)?;
            }
            let ck = if enforce {
                load_checkpoint_for(&checkpoint, &cfg.variant)?
            } else {
                load_checkpoint(&checkpoint)?
            };
            let ds = load_market(&data, sigma.as_deref(), &cfg)?;
            let splits = split_dataset(&ds, &cfg)?;
            let segment_ds = match segment {
                Segment::Train => splits.train,
                Segment::Test => splits.test,
                Segment::All => ds,
            };
            let result = backtest(&ck, &segment_ds, &cfg.env)?;
            create_dir(&out_dir)?;
            result.write_equity_csv(out_dir.join("equity.csv"))?;
            result.write_trajectory_csv(out_dir.join("trajectory.csv"))?;
            let report = result.report(&ck.policy.variant.name(), symbol.as_deref().unwrap_or(&cfg.symbol));
            report.write_json(out_dir.join("metrics.json"))?;
            println!(
                "{} {}: PR {:.4} (B&H {:.4}), TR {:.4}, {} trades",
                report.variant,
                report.symbol,
                report.metrics.profit_rate_annualized,
                report.buy_and_hold.profit_rate_annualized,
                report.metrics.tax_rate_annualized,
                report.metrics.n_trades
            );
        }
        Command::Report { out, metrics } => {
            let reports = metrics
                .iter()
                .map(BacktestReport::load_json)
                .collect::<crate::Result<Vec<_>>>()?;
            let rows = aggregate(&reports)?;
            write_report_csv(&out, &rows)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}
