use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::metrics::Metrics;
use crate::env::{buy_and_hold, EnvConfig, TradingEnv};
use crate::error::{Error, Result};
use crate::marketdata::{AlignedDataset, NormStats, Observation};
use crate::policy::BranchKind;

/// One row per trading day of the backtest range, marked at the day's open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquityRow {
    pub date: NaiveDate,
    pub value: f64,
    pub bh_value: f64,
    /// Action executed at this open (0 on the first day).
    pub action: f64,
    pub shares: u64,
    pub cash: f64,
    pub tax_paid: f64,
}

/// One row per executed step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub date: NaiveDate,
    pub open: f64,
    pub action: f64,
    pub order_shares: i64,
    pub tax_paid: f64,
    pub cash: f64,
    pub shares: u64,
    pub value: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub variant: String,
    pub symbol: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub n_days: usize,
    pub metrics: Metrics,
    pub buy_and_hold: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub equity: Vec<EquityRow>,
    pub trajectory: Vec<TrajectoryRow>,
    pub metrics: Metrics,
    pub buy_and_hold: Metrics,
}

/// Pure function of the equity rows: PR from `value`, TR from `tax_paid`,
/// trades from share changes. Both legs are measured from the initial
/// capital (`value` on the first day), so B&H includes its entry tax.
pub fn metrics_from_rows(rows: &[EquityRow]) -> Result<(Metrics, Metrics)> {
    if rows.len() < 2 {
        return Err(Error::SeriesTooShort { len: rows.len(), min: 2 });
    }
    let initial = rows[0].value;
    let values: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let taxes: Vec<f64> = rows.iter().map(|r| r.tax_paid).collect();
    let trades = rows.windows(2).filter(|w| w[0].shares != w[1].shares).count();
    let agent = Metrics::from_curve(&values, &taxes, trades)?;

    let mut bh: Vec<f64> = rows.iter().map(|r| r.bh_value).collect();
    bh[0] = initial;
    let entry_tax = initial - rows[0].bh_value;
    let bh_metrics = Metrics::from_curve(&bh, &[entry_tax], 1)?;
    Ok((agent, bh_metrics))
}

/// Runs `actor` over the whole of `dataset`: each day's action executes at
/// the next day's open.
pub fn run_backtest(
    dataset: &AlignedDataset,
    norm: Option<&NormStats>,
    env_template: &EnvConfig,
    mut actor: impl FnMut(&Observation) -> Result<f64>,
) -> Result<BacktestResult> {
    let mut config = env_template.clone();
    config.day_range = 0..dataset.len();
    config.episode_length = None;
    config.random_start = false;
    let bh = buy_and_hold(dataset, config.day_range.clone(), &config)?;
    let mut env = TradingEnv::new(dataset.clone(), norm.cloned(), config.clone())?;
    // No randomness is drawn with random_start off.
    let mut obs = env.reset(&mut crate::seeded_rng(0))?;

    let mut equity = vec![EquityRow {
        date: dataset.day(0).date,
        value: config.initial_cash,
        bh_value: bh[0],
        action: 0.0,
        shares: 0,
        cash: config.initial_cash,
        tax_paid: 0.0,
    }];
    let mut trajectory = Vec::with_capacity(dataset.len() - 1);
    loop {
        let a = actor(&obs)?;
        if !a.is_finite() {
            return Err(Error::NonFinite(format!("action {a} on {}", dataset.day(equity.len() - 1).date)));
        }
        let step = env.step(a.clamp(-1.0, 1.0))?;
        let info = step.info;
        equity.push(EquityRow {
            date: info.date,
            value: info.value,
            bh_value: bh[equity.len()],
            action: info.action,
            shares: info.shares,
            cash: info.cash,
            tax_paid: info.order.tax_paid,
        });
        trajectory.push(TrajectoryRow {
            date: info.date,
            open: info.open,
            action: info.action,
            order_shares: info.order.signed_shares,
            tax_paid: info.order.tax_paid,
            cash: info.cash,
            shares: info.shares,
            value: info.value,
            reward: step.reward,
        });
        if step.done {
            break;
        }
        obs = step.observation;
    }
    let (metrics, buy_and_hold) = metrics_from_rows(&equity)?;
    Ok(BacktestResult {
        equity,
        trajectory,
        metrics,
        buy_and_hold,
    })
}

/// Deterministic backtest of a checkpoint: the action is the clipped mean.
pub fn backtest(ck: &Checkpoint, dataset: &AlignedDataset, env_template: &EnvConfig) -> Result<BacktestResult> {
    let expect = |k: BranchKind| match k {
        BranchKind::Short => ck.norm.short.mean.len(),
        BranchKind::Mid => ck.norm.mid.mean.len(),
        BranchKind::Long => ck.norm.long.mean.len(),
    };
    let obs = dataset.window_at(0)?;
    for b in &ck.policy.branches {
        let (rows, cols) = match b.kind {
            BranchKind::Short => obs.short.shape(),
            BranchKind::Mid => obs.mid.shape(),
            BranchKind::Long => obs.long.shape(),
        };
        if cols != expect(b.kind) || b.net.input_size() != b.kind.input_size(ck.policy.variant.garch_feature) {
            return Err(Error::Shape(format!(
                "{:?} branch expects {} inputs; dataset windows are {rows}x{cols}, normaliser has {} columns",
                b.kind,
                b.net.input_size(),
                expect(b.kind)
            )));
        }
    }
    run_backtest(dataset, Some(&ck.norm), env_template, |o| {
        Ok(ck.policy.evaluate(o)?.deterministic_action())
    })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl BacktestResult {
    pub fn write_equity_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path.as_ref(), &self.equity)
    }

    pub fn write_trajectory_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path.as_ref(), &self.trajectory)
    }

    pub fn report(&self, variant: &str, symbol: &str) -> BacktestReport {
        BacktestReport {
            variant: variant.to_string(),
            symbol: symbol.to_string(),
            start: self.equity[0].date,
            end: self.equity[self.equity.len() - 1].date,
            n_days: self.equity.len() - 1,
            metrics: self.metrics,
            buy_and_hold: self.buy_and_hold,
        }
    }
}

impl BacktestReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Recomputes `(agent, buy-and-hold)` metrics from an emitted equity CSV.
pub fn metrics_from_equity_csv(path: impl AsRef<Path>) -> Result<(Metrics, Metrics)> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<EquityRow>, _>>()?;
    metrics_from_rows(&rows)
}
