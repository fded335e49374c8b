//! Multi-frequency OHLCVA bar series.
//!
//! A single five-minute feed drives all three frequencies: [`resample`] builds
//! daily and weekly bars, [`align`] works out which days have enough history to
//! form a full [`Observation`], and [`AlignedDataset::window_at`] extracts the
//! three feature windows for one decision day.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use chrono::{Datelike, Duration, IsoWeek, NaiveDate, NaiveDateTime, NaiveTime, Weekday};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::garch::GarchParams;

/// Five-minute bars in one trading day (4-hour session).
pub const BARS_PER_DAY: usize = 48;
/// Daily bars in the mid-frequency window.
pub const MID_ROWS: usize = 30;
/// Weekly bars in the long-frequency window.
pub const LONG_ROWS: usize = 30;
/// open, high, low, close, volume, amount.
pub const BAR_FEATURES: usize = 6;
/// Bar features plus the GARCH sigma column.
pub const MID_FEATURES: usize = BAR_FEATURES + 1;

const CSV_HEADER: [&str; 7] = ["timestamp", "open", "high", "low", "close", "volume", "amount"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frequency {
    FiveMin,
    Daily,
    Weekly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub timestamp: NaiveDateTime,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
    pub amount: f64,
}

impl Bar {
    pub fn date(&self) -> NaiveDate {
        self.timestamp.date()
    }

    pub fn features(&self) -> [f64; BAR_FEATURES] {
        [self.open, self.high, self.low, self.close, self.volume, self.amount]
    }

    /// Checks the OHLC ordering and sign constraints, returning a description
    /// of the first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let values = self.features();
        if values.iter().any(|v| !v.is_finite()) {
            return Err("non-finite field".into());
        }
        if self.low <= 0.0 {
            return Err(format!("low {} must be positive", self.low));
        }
        if self.high < self.open.max(self.close) {
            return Err(format!(
                "high {} below max(open, close) {}",
                self.high,
                self.open.max(self.close)
            ));
        }
        if self.low > self.open.min(self.close) {
            return Err(format!(
                "low {} above min(open, close) {}",
                self.low,
                self.open.min(self.close)
            ));
        }
        if self.volume < 0.0 || self.amount < 0.0 {
            return Err("volume and amount must be non-negative".into());
        }
        Ok(())
    }
}

/// Time-ordered bars of a single frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct BarSeries {
    frequency: Frequency,
    bars: Vec<Bar>,
}

impl BarSeries {
    /// Validates every bar, timestamp monotonicity and, for five-minute data,
    /// the 48-bars-per-day calendar.
    pub fn new(frequency: Frequency, bars: Vec<Bar>) -> Result<Self> {
        for (i, bar) in bars.iter().enumerate() {
            bar.validate()
                .map_err(|m| Error::Data(format!("bar {i} ({}): {m}", bar.timestamp)))?;
        }
        if let Some(i) = bars
            .windows(2)
            .position(|w| w[1].timestamp <= w[0].timestamp)
        {
            return Err(Error::Data(format!(
                "timestamps not strictly increasing at bar {}",
                i + 1
            )));
        }
        let series = BarSeries { frequency, bars };
        if frequency == Frequency::FiveMin {
            series.day_groups()?;
        }
        Ok(series)
    }

    pub fn frequency(&self) -> Frequency {
        self.frequency
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    /// Contiguous runs of bars sharing a calendar date, as `(date, start)`;
    /// every run must hold exactly [`BARS_PER_DAY`] bars.
    fn day_groups(&self) -> Result<Vec<(NaiveDate, usize)>> {
        let mut groups = Vec::new();
        let mut start = 0;
        while start < self.bars.len() {
            let date = self.bars[start].date();
            let end = self.bars[start..]
                .iter()
                .position(|b| b.date() != date)
                .map_or(self.bars.len(), |p| start + p);
            if end - start != BARS_PER_DAY {
                return Err(Error::IncompleteDay {
                    date,
                    count: end - start,
                });
            }
            groups.push((date, start));
            start = end;
        }
        Ok(groups)
    }
}

fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
    ];
    let raw = raw.trim();
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
        .or_else(|| {
            NaiveDate::parse_from_str(raw, "%Y-%m-%d")
                .ok()
                .map(|d| d.and_time(NaiveTime::MIN))
        })
}

fn format_timestamp(ts: NaiveDateTime, frequency: Frequency) -> String {
    match frequency {
        Frequency::FiveMin => ts.format("%Y-%m-%dT%H:%M").to_string(),
        Frequency::Daily | Frequency::Weekly => ts.format("%Y-%m-%d").to_string(),
    }
}

/// Reads a `timestamp,open,high,low,close,volume,amount` CSV.
pub fn load_bars(path: impl AsRef<Path>, frequency: Frequency) -> Result<BarSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_bars(file, path, frequency)
}

pub(crate) fn read_bars(
    reader: impl std::io::Read,
    path: &Path,
    frequency: Frequency,
) -> Result<BarSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let malformed = |row: usize, message: String| Error::MalformedRow {
        path: path.to_path_buf(),
        row,
        line: row + 1,
        message,
    };
    let header = rdr.headers()?.clone();
    let header: Vec<&str> = header.iter().map(str::trim).collect();
    if header.len() < CSV_HEADER.len() || header[..CSV_HEADER.len()] != CSV_HEADER {
        return Err(malformed(0, format!("expected header {}", CSV_HEADER.join(","))));
    }

    let mut bars: Vec<Bar> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| malformed(row, e.to_string()))?;
        if record.len() < CSV_HEADER.len() {
            return Err(malformed(row, format!("expected {} fields", CSV_HEADER.len())));
        }
        let timestamp = parse_timestamp(&record[0])
            .ok_or_else(|| malformed(row, format!("bad timestamp {:?}", &record[0])))?;
        let mut values = [0.0; BAR_FEATURES];
        for (k, v) in values.iter_mut().enumerate() {
            *v = record[k + 1]
                .trim()
                .parse::<f64>()
                .map_err(|_| malformed(row, format!("bad {} {:?}", CSV_HEADER[k + 1], &record[k + 1])))?;
        }
        let [open, high, low, close, volume, amount] = values;
        let bar = Bar {
            timestamp,
            open,
            high,
            low,
            close,
            volume,
            amount,
        };
        bar.validate().map_err(|m| malformed(row, m))?;
        if let Some(prev) = bars.last() {
            if bar.timestamp <= prev.timestamp {
                return Err(Error::NonMonotonic {
                    path: path.to_path_buf(),
                    row,
                    line: row + 1,
                });
            }
        }
        bars.push(bar);
    }
    BarSeries::new(frequency, bars)
}

/// Writes a series in the CSV bar format.
pub fn write_bars(path: impl AsRef<Path>, series: &BarSeries) -> Result<()> {
    write_bars_with_extra(path, series, None)
}

/// Writes daily bars with an extra `sigma` column.
pub fn write_bars_with_sigma(path: impl AsRef<Path>, series: &BarSeries, sigma: &[f64]) -> Result<()> {
    if sigma.len() != series.len() {
        return Err(Error::Shape(format!(
            "{} sigma values for {} bars",
            sigma.len(),
            series.len()
        )));
    }
    write_bars_with_extra(path, series, Some(("sigma", sigma)))
}

fn write_bars_with_extra(
    path: impl AsRef<Path>,
    series: &BarSeries,
    extra: Option<(&str, &[f64])>,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header: Vec<&str> = CSV_HEADER.to_vec();
    if let Some((name, _)) = extra {
        header.push(name);
    }
    w.write_record(&header)?;
    for (i, bar) in series.bars().iter().enumerate() {
        let mut rec = vec![format_timestamp(bar.timestamp, series.frequency())];
        rec.extend(bar.features().iter().map(|v| v.to_string()));
        if let Some((_, values)) = extra {
            rec.push(values[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads the `sigma` column of a daily CSV written by [`write_bars_with_sigma`].
pub fn load_sigma(path: impl AsRef<Path>) -> Result<(BarSeries, Vec<f64>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let series = read_bars(text.as_bytes(), path, Frequency::Daily)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let column = rdr
        .headers()?
        .iter()
        .position(|h| h.trim() == "sigma")
        .ok_or_else(|| Error::Data(format!("{}: no sigma column", path.display())))?;
    let mut sigma = Vec::with_capacity(series.len());
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let v: f64 = record
            .get(column)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::MalformedRow {
                path: path.to_path_buf(),
                row: i + 1,
                line: i + 2,
                message: "bad sigma".into(),
            })?;
        sigma.push(v);
    }
    Ok((series, sigma))
}

fn aggregate(bars: &[Bar], timestamp: NaiveDateTime) -> Bar {
    let first = &bars[0];
    let last = &bars[bars.len() - 1];
    Bar {
        timestamp,
        open: first.open,
        close: last.close,
        high: bars.iter().map(|b| b.high).fold(f64::NEG_INFINITY, f64::max),
        low: bars.iter().map(|b| b.low).fold(f64::INFINITY, f64::min),
        volume: bars.iter().map(|b| b.volume).sum(),
        amount: bars.iter().map(|b| b.amount).sum(),
    }
}

fn week_of(date: NaiveDate) -> IsoWeek {
    date.iso_week()
}

/// Aggregates five-minute bars into daily bars and daily bars into calendar
/// (ISO) weekly bars. Weekly bars are stamped with their first trading day.
pub fn resample(five_min: &BarSeries) -> Result<(BarSeries, BarSeries)> {
    if five_min.frequency() != Frequency::FiveMin {
        return Err(Error::Data("resample expects five-minute bars".into()));
    }
    let groups = five_min.day_groups()?;
    let daily: Vec<Bar> = groups
        .iter()
        .map(|&(date, start)| {
            aggregate(
                &five_min.bars()[start..start + BARS_PER_DAY],
                date.and_time(NaiveTime::MIN),
            )
        })
        .collect();

    let mut weekly = Vec::new();
    let mut start = 0;
    while start < daily.len() {
        let week = week_of(daily[start].date());
        let end = daily[start..]
            .iter()
            .position(|b| week_of(b.date()) != week)
            .map_or(daily.len(), |p| start + p);
        weekly.push(aggregate(&daily[start..end], daily[start].timestamp));
        start = end;
    }

    Ok((
        BarSeries::new(Frequency::Daily, daily)?,
        BarSeries::new(Frequency::Weekly, weekly)?,
    ))
}

/// Row-major dense matrix holding one feature window.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Window {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Window {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} window",
                data.len()
            )));
        }
        Ok(Window { rows, cols, data })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Flattened row-major contents.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn push_row(data: &mut Vec<f64>, values: &[f64]) {
        data.extend_from_slice(values);
    }
}

/// The three raw feature windows for one decision day.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// 48x6: the decision day's five-minute bars.
    pub short: Window,
    /// 30x7: daily bars ending at the decision day, sigma appended.
    pub mid: Window,
    /// 30x6: 29 completed weeks plus the in-progress week up to the decision day.
    pub long: Window,
}

impl Observation {
    pub fn is_finite(&self) -> bool {
        [&self.short, &self.mid, &self.long]
            .iter()
            .all(|w| w.data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
struct MarketSeries {
    five_min: BarSeries,
    daily: BarSeries,
    weekly: BarSeries,
    daily_volatility: Vec<f64>,
}

/// Indices of one tradable day into the underlying series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DayRef {
    pub date: NaiveDate,
    pub daily: usize,
    pub five_min_start: usize,
    pub week: usize,
    /// First daily index of this day's calendar week.
    pub week_first_daily: usize,
}

/// Three aligned series plus the list of days for which a full observation
/// exists. Splits share the underlying series so test windows can look back
/// into training history.
#[derive(Debug, Clone)]
pub struct AlignedDataset {
    series: Arc<MarketSeries>,
    days: Vec<DayRef>,
}

/// Builds the aligned dataset; a day is tradable when it has 48 five-minute
/// bars, at least 29 earlier daily bars and at least 29 earlier weekly bars.
pub fn align(
    five_min: BarSeries,
    daily: BarSeries,
    weekly: BarSeries,
    daily_volatility: Vec<f64>,
) -> Result<AlignedDataset> {
    if daily_volatility.len() != daily.len() {
        return Err(Error::Shape(format!(
            "{} volatility values for {} daily bars",
            daily_volatility.len(),
            daily.len()
        )));
    }
    if let Some(i) = daily_volatility.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Data(format!(
            "daily volatility at index {i} is {}, expected finite and positive",
            daily_volatility[i]
        )));
    }
    let five_min_days: HashMap<NaiveDate, usize> = five_min.day_groups()?.into_iter().collect();
    let weeks: HashMap<IsoWeek, usize> = weekly
        .bars()
        .iter()
        .enumerate()
        .map(|(i, b)| (week_of(b.date()), i))
        .collect();

    let mut days = Vec::new();
    let mut week_first_daily = 0;
    for (i, bar) in daily.bars().iter().enumerate() {
        let date = bar.date();
        if i == 0 || week_of(daily.bars()[i - 1].date()) != week_of(date) {
            week_first_daily = i;
        }
        let (Some(&five_min_start), Some(&week)) = (five_min_days.get(&date), weeks.get(&week_of(date)))
        else {
            continue;
        };
        if i + 1 >= MID_ROWS && week + 1 >= LONG_ROWS {
            days.push(DayRef {
                date,
                daily: i,
                five_min_start,
                week,
                week_first_daily,
            });
        }
    }
    if days.is_empty() {
        return Err(Error::Data(
            "no day has full five-minute, daily and weekly coverage".into(),
        ));
    }
    Ok(AlignedDataset {
        series: Arc::new(MarketSeries {
            five_min,
            daily,
            weekly,
            daily_volatility,
        }),
        days,
    })
}

impl AlignedDataset {
    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn trading_days(&self) -> Vec<NaiveDate> {
        self.days.iter().map(|d| d.date).collect()
    }

    pub fn day(&self, day_index: usize) -> &DayRef {
        &self.days[day_index]
    }

    pub fn five_min(&self) -> &BarSeries {
        &self.series.five_min
    }

    pub fn daily(&self) -> &BarSeries {
        &self.series.daily
    }

    pub fn weekly(&self) -> &BarSeries {
        &self.series.weekly
    }

    pub fn daily_volatility(&self) -> &[f64] {
        &self.series.daily_volatility
    }

    /// Daily bar of trading day `day_index`.
    pub fn daily_bar(&self, day_index: usize) -> &Bar {
        &self.series.daily.bars()[self.days[day_index].daily]
    }

    /// Opening price of trading day `day_index`.
    pub fn open(&self, day_index: usize) -> f64 {
        self.daily_bar(day_index).open
    }

    /// Aggregate of the current calendar week's daily bars up to and
    /// including the given day.
    fn partial_week(&self, day: &DayRef) -> Bar {
        let daily = &self.series.daily.bars()[day.week_first_daily..=day.daily];
        aggregate(daily, self.series.weekly.bars()[day.week].timestamp)
    }

    pub fn window_at(&self, day_index: usize) -> Result<Observation> {
        let day = self.days.get(day_index).ok_or_else(|| {
            Error::Data(format!(
                "day index {day_index} out of range for {} trading days",
                self.days.len()
            ))
        })?;
        let s = &self.series;

        let mut short = Vec::with_capacity(BARS_PER_DAY * BAR_FEATURES);
        for bar in &s.five_min.bars()[day.five_min_start..day.five_min_start + BARS_PER_DAY] {
            Window::push_row(&mut short, &bar.features());
        }

        let mut mid = Vec::with_capacity(MID_ROWS * MID_FEATURES);
        for i in day.daily + 1 - MID_ROWS..=day.daily {
            Window::push_row(&mut mid, &s.daily.bars()[i].features());
            mid.push(s.daily_volatility[i]);
        }

        let mut long = Vec::with_capacity(LONG_ROWS * BAR_FEATURES);
        for bar in &s.weekly.bars()[day.week + 1 - LONG_ROWS..day.week] {
            Window::push_row(&mut long, &bar.features());
        }
        Window::push_row(&mut long, &self.partial_week(day).features());

        Ok(Observation {
            short: Window::from_rows(BARS_PER_DAY, BAR_FEATURES, short)?,
            mid: Window::from_rows(MID_ROWS, MID_FEATURES, mid)?,
            long: Window::from_rows(LONG_ROWS, BAR_FEATURES, long)?,
        })
    }

    /// Partitions trading days: `train` strictly before `boundary`, `test`
    /// at or after it.
    pub fn split(&self, boundary: NaiveDate) -> Result<(AlignedDataset, AlignedDataset)> {
        let first = self.days[0].date;
        let last = self.days[self.days.len() - 1].date;
        if boundary <= first || boundary > last {
            return Err(Error::Data(format!(
                "split boundary {boundary} must lie in ({first}, {last}]"
            )));
        }
        let k = self.days.partition_point(|d| d.date < boundary);
        Ok(self.split_at(k))
    }

    /// Splits at trading-day index `k` (`0 < k < len`).
    pub fn split_at(&self, k: usize) -> (AlignedDataset, AlignedDataset) {
        let train = AlignedDataset {
            series: Arc::clone(&self.series),
            days: self.days[..k].to_vec(),
        };
        let test = AlignedDataset {
            series: Arc::clone(&self.series),
            days: self.days[k..].to_vec(),
        };
        (train, test)
    }
}

/// Per-column mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    /// Population statistics over `rows`; zero-variance columns get std 1.
    pub fn fit<'a>(cols: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; cols];
        let mut rows_vec: Vec<&[f64]> = Vec::new();
        for row in rows {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            rows_vec.push(row);
            n += 1;
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut ss = vec![0.0; cols];
        for row in &rows_vec {
            for c in 0..cols {
                let d = row[c] - mean[c];
                ss[c] += d * d;
            }
        }
        let std = ss
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n).sqrt();
                // Constant columns (up to rounding in the mean) normalise to zero.
                if sd > 1e-12 * m.abs().max(1.0) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        ColumnStats { mean, std }
    }

    fn apply(&self, window: &Window) -> Window {
        let cols = window.cols;
        let data = window
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % cols]) / self.std[i % cols])
            .collect();
        Window {
            rows: window.rows,
            cols,
            data,
        }
    }
}

/// Normalisation statistics for the three window kinds, fit on training days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub short: ColumnStats,
    pub mid: ColumnStats,
    pub long: ColumnStats,
}

/// Fits z-score statistics on the distinct rows that training days contribute:
/// their five-minute bars, their daily bars with sigma, and the weekly bars of
/// the weeks they fall in.
pub fn fit_normalizer(dataset: &AlignedDataset, train_range: Range<usize>) -> Result<NormStats> {
    if train_range.is_empty() || train_range.end > dataset.len() {
        return Err(Error::Data(format!(
            "training range {train_range:?} invalid for {} trading days",
            dataset.len()
        )));
    }
    let s = &dataset.series;
    let days = &dataset.days[train_range];

    let short_rows: Vec<[f64; BAR_FEATURES]> = days
        .iter()
        .flat_map(|d| &s.five_min.bars()[d.five_min_start..d.five_min_start + BARS_PER_DAY])
        .map(Bar::features)
        .collect();
    let mid_rows: Vec<[f64; MID_FEATURES]> = days
        .iter()
        .map(|d| {
            let f = s.daily.bars()[d.daily].features();
            [f[0], f[1], f[2], f[3], f[4], f[5], s.daily_volatility[d.daily]]
        })
        .collect();
    let mut weeks: Vec<usize> = days.iter().map(|d| d.week).collect();
    weeks.dedup();
    let long_rows: Vec<[f64; BAR_FEATURES]> =
        weeks.iter().map(|&w| s.weekly.bars()[w].features()).collect();

    Ok(NormStats {
        short: ColumnStats::fit(BAR_FEATURES, short_rows.iter().map(|r| &r[..])),
        mid: ColumnStats::fit(MID_FEATURES, mid_rows.iter().map(|r| &r[..])),
        long: ColumnStats::fit(BAR_FEATURES, long_rows.iter().map(|r| &r[..])),
    })
}

pub fn normalize(obs: &Observation, stats: &NormStats) -> Observation {
    Observation {
        short: stats.short.apply(&obs.short),
        mid: stats.mid.apply(&obs.mid),
        long: stats.long.apply(&obs.long),
    }
}

/// Daily log-returns of closes; index 0 (no previous close) is 0.
pub fn daily_log_returns(daily: &BarSeries) -> Vec<f64> {
    let bars = daily.bars();
    let mut out = Vec::with_capacity(bars.len());
    if !bars.is_empty() {
        out.push(0.0);
    }
    out.extend(bars.windows(2).map(|w| (w[1].close / w[0].close).ln()));
    out
}

/// Parameters of the synthetic market generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub start_price: f64,
    /// Constant daily log drift.
    pub drift: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta1: f64,
    /// Intraday bridge noise, as a multiple of the day's sigma.
    pub intraday_noise: f64,
    /// Days per drift regime; 0 disables regimes.
    pub regime_length: usize,
    /// Regime drift magnitude; the sign alternates every `regime_length` days.
    pub regime_drift: f64,
    pub base_volume: f64,
    pub start_date: NaiveDate,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            start_price: 20.0,
            drift: 0.0,
            alpha0: 2.0e-6,
            alpha1: 0.08,
            beta1: 0.90,
            intraday_noise: 0.5,
            regime_length: 0,
            regime_drift: 0.0,
            base_volume: 10_000.0,
            start_date: NaiveDate::from_ymd_opt(2011, 1, 4).expect("valid date"),
        }
    }
}

impl GenParams {
    fn validate(&self) -> Result<Option<GarchParams>> {
        if !(self.start_price > 0.0) || !(self.base_volume >= 0.0) || !(self.intraday_noise >= 0.0) {
            return Err(Error::InvalidParams(
                "start_price must be positive, base_volume and intraday_noise non-negative".into(),
            ));
        }
        if ![self.drift, self.regime_drift].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParams("drift must be finite".into()));
        }
        // alpha0 = alpha1 = beta1 = 0 is the zero-volatility generator.
        if self.alpha0 == 0.0 && self.alpha1 == 0.0 && self.beta1 == 0.0 {
            return Ok(None);
        }
        GarchParams::new(0.0, self.alpha0, self.alpha1, self.beta1).map(Some)
    }
}

/// Weekday trading calendar starting at `start` (inclusive if a weekday).
pub fn trading_calendar(start: NaiveDate, n_days: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n_days);
    let mut d = start;
    while out.len() < n_days {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Bar end times of the 09:30-11:30 and 13:00-15:00 sessions.
pub fn session_times() -> Vec<NaiveTime> {
    let morning = NaiveTime::from_hms_opt(9, 30, 0).expect("valid time");
    let afternoon = NaiveTime::from_hms_opt(13, 0, 0).expect("valid time");
    (1..=24)
        .map(|k| morning + Duration::minutes(5 * k))
        .chain((1..=24).map(|k| afternoon + Duration::minutes(5 * k)))
        .collect()
}

/// Simulates a five-minute feed whose daily log-returns are
/// `drift ± regime_drift + a_t` with GARCH(1,1) innovations `a_t`. Each day's
/// intraday path is a Brownian bridge from open to close, so daily bars
/// resampled from the output reproduce the simulated returns exactly.
pub fn simulate_market(params: &GenParams, n_days: usize, seed: u64) -> Result<BarSeries> {
    if n_days == 0 {
        return Err(Error::InvalidParams("n_days must be at least 1".into()));
    }
    let garch = params.validate()?;
    let mut rng = crate::seeded_rng(seed);
    let times = session_times();
    let calendar = trading_calendar(params.start_date, n_days);

    let mut variance = garch.as_ref().map_or(0.0, |g| g.unconditional_variance());
    let mut prev_shock: f64 = 0.0;
    // Log price relative to the start, so a flat market reproduces it exactly.
    let mut log_price = 0.0;
    let steps = BARS_PER_DAY as f64;
    let mut bars = Vec::with_capacity(n_days * BARS_PER_DAY);
    let mut path = vec![0.0; BARS_PER_DAY + 1];

    for (day, date) in calendar.iter().enumerate() {
        if let (Some(g), true) = (&garch, day > 0) {
            variance = g.alpha0 + g.alpha1 * prev_shock * prev_shock + g.beta1 * variance;
        }
        let sigma = variance.sqrt();
        let z: f64 = rng.sample(StandardNormal);
        let shock = sigma * z;
        prev_shock = shock;
        let regime = if params.regime_length > 0 && (day / params.regime_length) % 2 == 1 {
            -params.regime_drift
        } else {
            params.regime_drift
        };
        let day_return = params.drift + regime + shock;

        // Brownian bridge pinned at the day's open and close.
        let step_sd = params.intraday_noise * sigma / steps.sqrt();
        let mut walk = 0.0;
        path[0] = 0.0;
        for p in path.iter_mut().skip(1) {
            let dz: f64 = rng.sample(StandardNormal);
            walk += step_sd * dz;
            *p = walk;
        }
        let end = path[BARS_PER_DAY];
        for (k, p) in path.iter_mut().enumerate() {
            let frac = k as f64 / steps;
            *p = log_price + frac * day_return + (*p - frac * end);
        }
        path[BARS_PER_DAY] = log_price + day_return;

        for k in 0..BARS_PER_DAY {
            let open = params.start_price * path[k].exp();
            let close = params.start_price * path[k + 1].exp();
            let wick_up: f64 = rng.sample::<f64, _>(StandardNormal).abs() * step_sd * 0.5;
            let wick_dn: f64 = rng.sample::<f64, _>(StandardNormal).abs() * step_sd * 0.5;
            let high = open.max(close) * wick_up.exp();
            let low = open.min(close) * (-wick_dn).exp();
            let vz: f64 = rng.sample(StandardNormal);
            let volume = (params.base_volume * (0.3 * vz).exp()).round();
            let amount = volume * (open + high + low + close) / 4.0;
            bars.push(Bar {
                timestamp: date.and_time(times[k]),
                open,
                high,
                low,
                close,
                volume,
                amount,
            });
        }
        log_price += day_return;
    }
    BarSeries::new(Frequency::FiveMin, bars)
}
