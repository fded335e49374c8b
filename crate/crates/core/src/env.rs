//! Single-stock trading MDP.
//!
//! The agent observes day `d` (its five-minute bars, daily and weekly
//! history), picks an action in [-1, 1], and the resulting order executes at
//! the open of day `d + 1`. Positive actions spend that fraction of cash,
//! negative actions sell that fraction of the holding, both rounded down to
//! whole lots. The reward is the portfolio's open-to-open return minus the
//! stock's open-to-open return.

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{normalize, AlignedDataset, NormStats, Observation};
use crate::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub initial_cash: f64,
    pub tax_rate: f64,
    pub lot_size: u64,
    /// Trading-day indices an episode may cover; the last day is `end - 1`.
    pub day_range: Range<usize>,
    /// Steps per episode; `None` runs the whole range.
    pub episode_length: Option<usize>,
    /// Start episodes at a uniformly drawn day in the range.
    pub random_start: bool,
    /// Also charge `tax_rate` on sells. Off by default: only buys are taxed.
    pub sell_tax: bool,
}

impl EnvConfig {
    pub fn new(day_range: Range<usize>) -> Self {
        EnvConfig {
            initial_cash: 1_000_000.0,
            tax_rate: 0.001,
            lot_size: 100,
            day_range,
            episode_length: None,
            random_start: false,
            sell_tax: false,
        }
    }

    pub fn validate(&self, dataset: &AlignedDataset) -> Result<()> {
        if !(self.initial_cash > 0.0 && self.initial_cash.is_finite()) {
            return Err(Error::InvalidParams("initial_cash must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.tax_rate) {
            return Err(Error::InvalidParams("tax_rate must lie in [0, 1)".into()));
        }
        if self.lot_size == 0 {
            return Err(Error::InvalidParams("lot_size must be at least 1".into()));
        }
        let r = &self.day_range;
        if r.end > dataset.len() || r.end < r.start + 2 {
            return Err(Error::InvalidParams(format!(
                "episode range {r:?} needs at least two days within {} trading days",
                dataset.len()
            )));
        }
        if self.episode_length == Some(0) {
            return Err(Error::InvalidParams("episode_length must be positive".into()));
        }
        Ok(())
    }

    /// Longest episode the range allows, capped by `episode_length`.
    fn steps_per_episode(&self) -> usize {
        let max = self.day_range.end - self.day_range.start - 1;
        self.episode_length.map_or(max, |l| l.min(max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortfolioState {
    pub cash: f64,
    pub shares: u64,
    pub day_index: usize,
}

impl PortfolioState {
    pub fn value_at(&self, price: f64) -> f64 {
        self.cash + self.shares as f64 * price
    }

    /// Marked to the open of the current day.
    pub fn portfolio_value(&self, dataset: &AlignedDataset) -> f64 {
        self.value_at(dataset.open(self.day_index))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Order {
    /// Positive buys, negative sells, always a lot multiple.
    pub signed_shares: i64,
    pub execution_price: f64,
    pub tax_paid: f64,
}

impl Order {
    fn none(price: f64) -> Self {
        Order {
            signed_shares: 0,
            execution_price: price,
            tax_paid: 0.0,
        }
    }
}

/// Maps an action to a lot-sized order at `opening`.
///
/// Buys take `floor(cash * a / (opening * (1 + tax)))` shares rounded down to
/// the lot; sells take `floor(shares * |a|)` rounded down to the lot. The
/// resulting cash is never negative.
pub fn map_action(a: f64, p: &PortfolioState, opening: f64, config: &EnvConfig) -> Order {
    let lot = config.lot_size;
    if a > 0.0 {
        let raw = (p.cash * a / (opening * (1.0 + config.tax_rate))).floor().max(0.0) as u64;
        let mut shares = raw / lot * lot;
        // Rounding in the product can push the cost a hair over the cash.
        while shares > 0 && buy_cost(shares, opening, config.tax_rate) > p.cash {
            shares -= lot;
        }
        if shares == 0 {
            return Order::none(opening);
        }
        Order {
            signed_shares: shares as i64,
            execution_price: opening,
            tax_paid: shares as f64 * opening * config.tax_rate,
        }
    } else if a < 0.0 {
        let raw = (p.shares as f64 * -a).floor() as u64;
        let shares = (raw.min(p.shares)) / lot * lot;
        if shares == 0 {
            return Order::none(opening);
        }
        let tax_paid = if config.sell_tax {
            shares as f64 * opening * config.tax_rate
        } else {
            0.0
        };
        Order {
            signed_shares: -(shares as i64),
            execution_price: opening,
            tax_paid,
        }
    } else {
        Order::none(opening)
    }
}

fn buy_cost(shares: u64, price: f64, tax_rate: f64) -> f64 {
    let gross = shares as f64 * price;
    gross + gross * tax_rate
}

/// Applies an order to the portfolio.
pub fn apply_order(p: &PortfolioState, order: &Order) -> PortfolioState {
    let gross = order.signed_shares.unsigned_abs() as f64 * order.execution_price;
    let mut next = *p;
    if order.signed_shares > 0 {
        next.cash = (p.cash - (gross + order.tax_paid)).max(0.0);
        next.shares += order.signed_shares as u64;
    } else if order.signed_shares < 0 {
        next.cash = p.cash + gross - order.tax_paid;
        next.shares -= order.signed_shares.unsigned_abs();
    }
    next
}

/// Excess return of the portfolio over the stock between two opens.
pub fn excess_return(prev_value: f64, value: f64, prev_open: f64, open: f64) -> f64 {
    (value - prev_value) / prev_value - (open - prev_open) / prev_open
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub date: chrono::NaiveDate,
    pub action: f64,
    pub order: Order,
    pub open: f64,
    pub cash: f64,
    pub shares: u64,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// Executes `a` chosen on `p.day_index` at the next day's open. Returns the
/// new portfolio, the order and the reward.
pub fn execute(
    p: &PortfolioState,
    a: f64,
    dataset: &AlignedDataset,
    config: &EnvConfig,
) -> Result<(PortfolioState, Order, f64)> {
    if !(-1.0..=1.0).contains(&a) {
        return Err(Error::InvalidParams(format!("action {a} outside [-1, 1]")));
    }
    if p.day_index + 1 >= dataset.len() {
        return Err(Error::EpisodeDone);
    }
    let prev_open = dataset.open(p.day_index);
    let open = dataset.open(p.day_index + 1);
    let prev_value = p.value_at(prev_open);
    let order = map_action(a, p, open, config);
    let mut next = apply_order(p, &order);
    next.day_index += 1;
    let reward = excess_return(prev_value, next.value_at(open), prev_open, open);
    Ok((next, order, reward))
}

/// Environment state machine wrapping [`execute`] with episode control and
/// observation normalisation.
#[derive(Debug, Clone)]
pub struct TradingEnv {
    dataset: AlignedDataset,
    norm: Option<NormStats>,
    config: EnvConfig,
    state: PortfolioState,
    episode_end: usize,
    done: bool,
}

impl TradingEnv {
    pub fn new(dataset: AlignedDataset, norm: Option<NormStats>, config: EnvConfig) -> Result<Self> {
        config.validate(&dataset)?;
        let start = config.day_range.start;
        Ok(TradingEnv {
            state: PortfolioState {
                cash: config.initial_cash,
                shares: 0,
                day_index: start,
            },
            episode_end: start,
            done: true,
            dataset,
            norm,
            config,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn dataset(&self) -> &AlignedDataset {
        &self.dataset
    }

    pub fn state(&self) -> &PortfolioState {
        &self.state
    }

    pub fn episode_end(&self) -> usize {
        self.episode_end
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn portfolio_value(&self) -> f64 {
        self.state.portfolio_value(&self.dataset)
    }

    pub fn observation(&self) -> Result<Observation> {
        let raw = self.dataset.window_at(self.state.day_index)?;
        Ok(match &self.norm {
            Some(stats) => normalize(&raw, stats),
            None => raw,
        })
    }

    /// Starts a new all-cash episode. With `random_start` the first day is
    /// drawn uniformly so that a full-length episode fits in the range.
    pub fn reset(&mut self, rng: &mut Rng) -> Result<Observation> {
        let range = &self.config.day_range;
        let steps = self.config.steps_per_episode();
        let last_start = range.end - 1 - steps;
        let start = if self.config.random_start && last_start > range.start {
            rng.random_range(range.start..=last_start)
        } else {
            range.start
        };
        self.state = PortfolioState {
            cash: self.config.initial_cash,
            shares: 0,
            day_index: start,
        };
        self.episode_end = start + steps;
        self.done = false;
        self.observation()
    }

    pub fn step(&mut self, a: f64) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let (next, order, reward) = execute(&self.state, a, &self.dataset, &self.config)?;
        self.state = next;
        self.done = next.day_index >= self.episode_end;
        let open = self.dataset.open(next.day_index);
        Ok(StepResult {
            observation: self.observation()?,
            reward,
            done: self.done,
            info: StepInfo {
                date: self.dataset.day(next.day_index).date,
                action: a,
                order,
                open,
                cash: next.cash,
                shares: next.shares,
                value: next.value_at(open),
            },
        })
    }
}

/// Buy&Hold equity curve over `range`: all cash into whole lots at the first
/// open (buy tax applied), then marked at every daily open.
pub fn buy_and_hold(dataset: &AlignedDataset, range: Range<usize>, config: &EnvConfig) -> Result<Vec<f64>> {
    if range.is_empty() || range.end > dataset.len() {
        return Err(Error::InvalidParams(format!(
            "buy-and-hold range {range:?} invalid for {} trading days",
            dataset.len()
        )));
    }
    let start = PortfolioState {
        cash: config.initial_cash,
        shares: 0,
        day_index: range.start,
    };
    let order = map_action(1.0, &start, dataset.open(range.start), config);
    let held = apply_order(&start, &order);
    Ok(range.map(|d| held.value_at(dataset.open(d))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marketdata::{align, resample, simulate_market, Bar, BarSeries, Frequency, GenParams};
    use approx::assert_abs_diff_eq;

    fn cfg() -> EnvConfig {
        EnvConfig::new(0..10)
    }

    fn portfolio(cash: f64, shares: u64) -> PortfolioState {
        PortfolioState { cash, shares, day_index: 0 }
    }

    #[test]
    fn buy_maps_to_floor_lot() {
        let o = map_action(0.3, &portfolio(100_000.0, 0), 10.0, &cfg());
        // 100000 * 0.3 / (10 * 1.001) = 2997.0..., floor to lot -> 2900.
        assert_eq!(o.signed_shares, 2900);
        assert_abs_diff_eq!(o.tax_paid, 29.0, epsilon = 1e-9);
    }

    #[test]
    fn sell_maps_to_lot() {
        let o = map_action(-0.5, &portfolio(0.0, 1000), 10.0, &cfg());
        assert_eq!(o.signed_shares, -500);
        assert_eq!(o.tax_paid, 0.0);
        let o = map_action(-1.0, &portfolio(0.0, 1000), 10.0, &cfg());
        assert_eq!(o.signed_shares, -1000);
        let o = map_action(-0.33, &portfolio(0.0, 1000), 10.0, &cfg());
        assert_eq!(o.signed_shares, -300);
    }

    #[test]
    fn zero_orders() {
        assert_eq!(map_action(0.0, &portfolio(100_000.0, 500), 10.0, &cfg()).signed_shares, 0);
        assert_eq!(map_action(1.0, &portfolio(900.0, 0), 10.0, &cfg()).signed_shares, 0);
        assert_eq!(map_action(-0.05, &portfolio(0.0, 1000), 10.0, &cfg()).signed_shares, 0);
        assert_eq!(map_action(-1.0, &portfolio(1000.0, 0), 10.0, &cfg()).signed_shares, 0);
    }

    #[test]
    fn full_buy_never_overdraws() {
        let c = cfg();
        for cash in [1_000.0, 1_001.0, 10_010.0, 1_000_000.0, 123_456.789] {
            for price in [0.01, 1.0, 9.99, 10.0, 10.01, 100.0] {
                let p = portfolio(cash, 0);
                let o = map_action(1.0, &p, price, &c);
                let next = apply_order(&p, &o);
                assert!(next.cash >= 0.0);
                assert_eq!(next.shares % 100, 0);
            }
        }
    }

    #[test]
    fn sell_tax_extension() {
        let mut c = cfg();
        c.sell_tax = true;
        let o = map_action(-1.0, &portfolio(0.0, 1000), 10.0, &c);
        assert_abs_diff_eq!(o.tax_paid, 10.0, epsilon = 1e-12);
    }

    /// Daily-only fixture with the given opens (closes equal opens).
    fn fixture(opens: &[f64]) -> AlignedDataset {
        let gen = GenParams {
            alpha0: 0.0,
            alpha1: 0.0,
            beta1: 0.0,
            ..GenParams::default()
        };
        let n = 150 + opens.len();
        let five = simulate_market(&gen, n, 0).unwrap();
        let (daily, weekly) = resample(&five).unwrap();
        let offset = daily.len() - opens.len();
        let bars: Vec<Bar> = daily
            .bars()
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let px = if i >= offset { opens[i - offset] } else { b.open };
                Bar { open: px, high: px, low: px, close: px, ..*b }
            })
            .collect();
        let daily = BarSeries::new(Frequency::Daily, bars).unwrap();
        let vol = vec![0.01; daily.len()];
        let ds = align(five, daily, weekly, vol).unwrap();
        let k = ds.len() - opens.len();
        ds.split_at(k).1
    }

    #[test]
    fn all_cash_hold_reward_is_minus_price_return() {
        let ds = fixture(&[10.0, 10.2]);
        let (_, _, r) = execute(&portfolio(100_000.0, 0), 0.0, &ds, &EnvConfig::new(0..2)).unwrap();
        assert_abs_diff_eq!(r, -0.02, epsilon = 1e-12);
    }

    #[test]
    fn fully_invested_hold_reward_is_zero() {
        let ds = fixture(&[10.0, 10.7]);
        let (_, _, r) = execute(&portfolio(0.0, 10_000), 0.0, &ds, &EnvConfig::new(0..2)).unwrap();
        assert_abs_diff_eq!(r, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn reward_hand_case() {
        assert_abs_diff_eq!(excess_return(100_000.0, 110_000.0, 10.0, 10.5), 0.05, epsilon = 1e-12);
    }

    #[test]
    fn execution_uses_next_open_and_conserves_value() {
        let ds = fixture(&[10.0, 12.0, 11.0]);
        let c = EnvConfig::new(0..3);
        let p0 = portfolio(100_000.0, 0);
        let (p1, o, _) = execute(&p0, 0.5, &ds, &c).unwrap();
        assert_eq!(o.execution_price, 12.0);
        assert_eq!(p1.day_index, 1);
        let lhs = p1.cash + p1.shares as f64 * 12.0;
        let rhs = p0.cash + p0.shares as f64 * 12.0 - o.tax_paid;
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
    }

    #[test]
    fn env_episode_control() {
        let ds = fixture(&[10.0, 10.5, 10.2, 10.8, 11.0]);
        let mut env = TradingEnv::new(ds, None, EnvConfig::new(0..5)).unwrap();
        let mut rng = crate::seeded_rng(1);
        assert!(env.step(0.0).is_err());
        env.reset(&mut rng).unwrap();
        assert_eq!(env.portfolio_value(), 1_000_000.0);
        let mut steps = 0;
        loop {
            let r = env.step(0.2).unwrap();
            steps += 1;
            if r.done {
                break;
            }
        }
        assert_eq!(steps, 4);
        assert!(matches!(env.step(0.0), Err(Error::EpisodeDone)));
        assert!(env.clone().step(2.0).is_err());
    }

    #[test]
    fn deterministic_reset_is_repeatable() {
        let ds = fixture(&[10.0, 10.5, 10.2, 10.8, 11.0]);
        let mut env = TradingEnv::new(ds, None, EnvConfig::new(1..5)).unwrap();
        let mut rng = crate::seeded_rng(1);
        let a = env.reset(&mut rng).unwrap();
        let s = *env.state();
        let b = env.reset(&mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(s, *env.state());
        assert_eq!(s.day_index, 1);
    }

    #[test]
    fn random_start_stays_in_range() {
        let gen = GenParams::default();
        let five = simulate_market(&gen, 260, 3).unwrap();
        let (daily, weekly) = resample(&five).unwrap();
        let vol = vec![0.01; daily.len()];
        let ds = align(five, daily, weekly, vol).unwrap();
        let mut c = EnvConfig::new(10..90);
        c.random_start = true;
        c.episode_length = Some(20);
        let mut env = TradingEnv::new(ds, None, c).unwrap();
        let mut rng = crate::seeded_rng(2);
        let (mut lo, mut hi) = (usize::MAX, 0);
        for _ in 0..10_000 {
            env.reset(&mut rng).unwrap();
            let d = env.state().day_index;
            lo = lo.min(d);
            hi = hi.max(d);
            assert!(env.episode_end() < 90);
            assert_eq!(env.episode_end() - d, 20);
        }
        assert_eq!((lo, hi), (10, 69));
    }

    #[test]
    fn invalid_config_rejected() {
        let ds = fixture(&[10.0, 10.5]);
        let mut c = EnvConfig::new(0..2);
        c.tax_rate = 1.0;
        assert!(TradingEnv::new(ds.clone(), None, c).is_err());
        assert!(TradingEnv::new(ds.clone(), None, EnvConfig::new(0..3)).is_err());
        let mut c = EnvConfig::new(0..2);
        c.lot_size = 0;
        assert!(TradingEnv::new(ds, None, c).is_err());
    }

    #[test]
    fn buy_and_hold_flat_and_doubling() {
        let ds = fixture(&[10.0, 10.0, 10.0]);
        let c = EnvConfig::new(0..3);
        let curve = buy_and_hold(&ds, 0..3, &c).unwrap();
        // floor(1e6 / 10.01) = 99900 shares costing 999000 plus 999 tax.
        assert_abs_diff_eq!(curve[0], 1_000_000.0 - 999.0, epsilon = 1e-6);
        assert!(curve.iter().all(|v| *v == curve[0]));

        let ds = fixture(&[10.0, 15.0, 20.0]);
        let curve = buy_and_hold(&ds, 0..3, &c).unwrap();
        let cash = 1_000_000.0 - 99_900.0 * 10.0 * 1.001;
        assert_abs_diff_eq!(curve[2] - cash, 2.0 * (curve[0] - cash), epsilon = 1e-6);
    }

    #[test]
    fn buy_and_hold_hand_curve() {
        let ds = fixture(&[8.0, 9.0, 7.5]);
        let mut c = EnvConfig::new(0..3);
        c.initial_cash = 10_000.0;
        // floor(10000 / 8.008) = 1248 -> 1200 shares; cost 9600 + 9.6 tax.
        let cash = 10_000.0 - 9_609.6;
        let expected = [cash + 9_600.0, cash + 10_800.0, cash + 9_000.0];
        let curve = buy_and_hold(&ds, 0..3, &c).unwrap();
        for (a, b) in curve.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
        assert!(buy_and_hold(&ds, 0..4, &c).is_err());
    }

    #[test]
    fn never_trading_invested_agent_has_zero_cumulative_reward() {
        let five = simulate_market(&GenParams::default(), 300, 9).unwrap();
        let (daily, weekly) = resample(&five).unwrap();
        let vol = vec![0.01; daily.len()];
        let ds = align(five, daily, weekly, vol).unwrap();
        let mut c = EnvConfig::new(0..ds.len());
        c.tax_rate = 0.0;
        let mut p = portfolio(0.0, 50_000);
        let mut total = 0.0;
        while p.day_index + 1 < ds.len() {
            let (next, order, r) = execute(&p, 0.0, &ds, &c).unwrap();
            assert_eq!(order.signed_shares, 0);
            total += r;
            p = next;
        }
        assert!(total.abs() < 1e-6, "{total}");
    }
}
