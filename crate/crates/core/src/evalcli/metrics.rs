use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Geometric annual return.
    pub profit_rate_annualized: f64,
    pub profit_rate_cumulative: f64,
    /// Annualised tax paid over initial capital.
    pub tax_rate_annualized: f64,
    pub n_trades: usize,
    pub final_value: f64,
}

impl Metrics {
    /// Metrics of an equity curve whose first value is the initial capital.
    /// `n_days` is the number of day-to-day intervals, `curve.len() - 1`.
    pub fn from_curve(curve: &[f64], taxes: &[f64], n_trades: usize) -> Result<Self> {
        let (profit_rate_annualized, profit_rate_cumulative) = profit_rate(curve, TRADING_DAYS_PER_YEAR)?;
        let tax_rate_annualized = tax_rate(taxes, curve[0], curve.len() - 1)?;
        Ok(Metrics {
            profit_rate_annualized,
            profit_rate_cumulative,
            tax_rate_annualized,
            n_trades,
            final_value: curve[curve.len() - 1],
        })
    }
}

/// `(annualised, cumulative)` profit rate of an equity curve.
pub fn profit_rate(curve: &[f64], trading_days_per_year: f64) -> Result<(f64, f64)> {
    if curve.len() < 2 {
        return Err(Error::SeriesTooShort {
            len: curve.len(),
            min: 2,
        });
    }
    if let Some(v) = curve.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::Data(format!("equity value {v} is not positive")));
    }
    let ratio = curve[curve.len() - 1] / curve[0];
    let n_days = (curve.len() - 1) as f64;
    let annualized = if ratio == 1.0 {
        0.0
    } else {
        ratio.powf(trading_days_per_year / n_days) - 1.0
    };
    Ok((annualized, ratio - 1.0))
}

/// `(sum(taxes) / initial_capital) * (252 / n_days)`.
pub fn tax_rate(taxes: &[f64], initial_capital: f64, n_days: usize) -> Result<f64> {
    if n_days == 0 || !(initial_capital > 0.0) {
        return Err(Error::InvalidParams(
            "tax rate needs n_days >= 1 and positive capital".into(),
        ));
    }
    let total: f64 = taxes.iter().sum();
    Ok(total / initial_capital * (TRADING_DAYS_PER_YEAR / n_days as f64))
}
