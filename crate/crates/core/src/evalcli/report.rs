use std::path::Path;

use super::backtest::BacktestReport;
use crate::error::{Error, Result};
use crate::policy::VariantConfig;

/// Mean annualised PR and TR of one variant across symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub profit_rate: f64,
    pub tax_rate: f64,
    pub n_symbols: usize,
}

/// Groups backtests by variant and averages arithmetically across symbols.
/// Preset variants come first in their canonical order.
pub fn aggregate(reports: &[BacktestReport]) -> Result<Vec<ReportRow>> {
    if reports.is_empty() {
        return Err(Error::Data("no backtest reports to aggregate".into()));
    }
    let mut order: Vec<String> = VariantConfig::presets().iter().map(|(n, _)| n.to_string()).collect();
    let mut extra: Vec<String> = reports
        .iter()
        .map(|r| r.variant.clone())
        .filter(|v| !order.contains(v))
        .collect();
    extra.sort();
    extra.dedup();
    order.extend(extra);
    Ok(order
        .into_iter()
        .filter_map(|variant| {
            let group: Vec<&BacktestReport> = reports.iter().filter(|r| r.variant == variant).collect();
            if group.is_empty() {
                return None;
            }
            let n = group.len() as f64;
            Some(ReportRow {
                profit_rate: group.iter().map(|r| r.metrics.profit_rate_annualized).sum::<f64>() / n,
                tax_rate: group.iter().map(|r| r.metrics.tax_rate_annualized).sum::<f64>() / n,
                n_symbols: group.len(),
                variant,
            })
        })
        .collect())
}

/// `variant,PR,TR`, one row per variant.
pub fn write_report_csv(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["variant", "PR", "TR"])?;
    for r in rows {
        w.write_record([r.variant.clone(), r.profit_rate.to_string(), r.tax_rate.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
