//! Backtesting, metrics, checkpoints, run configuration and the CLI.

pub mod backtest;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod report;

pub use backtest::{backtest, metrics_from_equity_csv, run_backtest, BacktestReport, BacktestResult, EquityRow, TrajectoryRow};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::RunConfig;
pub use metrics::{profit_rate, tax_rate, Metrics, TRADING_DAYS_PER_YEAR};
pub use pipeline::{build_dataset, load_market, split_dataset, train_variant, Splits, TrainOutcome};
pub use report::{aggregate, write_report_csv, ReportRow};
