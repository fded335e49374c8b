//! Flat `key=value` run configuration with dotted section prefixes:
//!
//! ```text
//! # comments and blank lines are ignored
//! seed=7
//! variant=MCTG
//! ppo.learning_rate=0.00025
//! policy.branch_hidden=32,16
//! ```

use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::marketdata::GenParams;
use crate::policy::{PolicyConfig, VariantConfig};
use crate::ppo::PpoConfig;

/// How trading days are divided into training and test segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SplitRule {
    /// Test starts at the first trading day on or after this date.
    Boundary(NaiveDate),
    /// Fraction of trading days used for training.
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: VariantConfig,
    pub symbol: String,
    pub generator: GenParams,
    /// Trading days produced by `generate-data`.
    pub n_days: usize,
    pub garch_window: usize,
    pub garch_refit_every: usize,
    pub split: SplitRule,
    /// Template for the training environment; the day range is set per run.
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub ppo: PpoConfig,
    /// Write a checkpoint every this many updates (0: final only).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut env = EnvConfig::new(0..0);
        env.episode_length = Some(252);
        env.random_start = true;
        RunConfig {
            seed: 0,
            variant: VariantConfig::mctg(),
            symbol: "SYN".into(),
            generator: GenParams::default(),
            n_days: 2400,
            garch_window: 250,
            garch_refit_every: 20,
            split: SplitRule::Fraction(0.8),
            env,
            policy: PolicyConfig::default(),
            ppo: PpoConfig::default(),
            checkpoint_every: 50,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_date(key: &str, value: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(value, "%Y-%m-%d")
        .map_err(|_| Error::Config(format!("{key}: expected YYYY-MM-DD, got {value:?}")))
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let g = &mut self.generator;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "variant" => self.variant = VariantConfig::from_name(v)?,
            "symbol" => self.symbol = v.to_string(),
            "generator.n_days" => self.n_days = parse(key, v)?,
            "generator.start_price" => g.start_price = parse(key, v)?,
            "generator.drift" => g.drift = parse(key, v)?,
            "generator.alpha0" => g.alpha0 = parse(key, v)?,
            "generator.alpha1" => g.alpha1 = parse(key, v)?,
            "generator.beta1" => g.beta1 = parse(key, v)?,
            "generator.intraday_noise" => g.intraday_noise = parse(key, v)?,
            "generator.regime_length" => g.regime_length = parse(key, v)?,
            "generator.regime_drift" => g.regime_drift = parse(key, v)?,
            "generator.base_volume" => g.base_volume = parse(key, v)?,
            "generator.start_date" => g.start_date = parse_date(key, v)?,
            "garch.window" => self.garch_window = parse(key, v)?,
            "garch.refit_every" => self.garch_refit_every = parse(key, v)?,
            "split.boundary" => self.split = SplitRule::Boundary(parse_date(key, v)?),
            "split.train_fraction" => self.split = SplitRule::Fraction(parse(key, v)?),
            "env.initial_cash" => self.env.initial_cash = parse(key, v)?,
            "env.tax_rate" => self.env.tax_rate = parse(key, v)?,
            "env.lot_size" => self.env.lot_size = parse(key, v)?,
            "env.episode_length" => {
                self.env.episode_length = match v {
                    "none" | "full" | "0" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "env.random_start" => self.env.random_start = parse_bool(key, v)?,
            "env.sell_tax" => self.env.sell_tax = parse_bool(key, v)?,
            "policy.branch_hidden" => {
                self.policy.branch_hidden = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "policy.branch_output" => self.policy.branch_output = parse(key, v)?,
            "policy.trunk_hidden" => self.policy.trunk_hidden = parse(key, v)?,
            "policy.dropout" => self.policy.dropout = parse(key, v)?,
            "policy.init_log_std" => self.policy.init_log_std = parse(key, v)?,
            "ppo.learning_rate" => self.ppo.learning_rate = parse(key, v)?,
            "ppo.rollout" => self.ppo.rollout = parse(key, v)?,
            "ppo.gamma" => self.ppo.gamma = parse(key, v)?,
            "ppo.minibatches" => self.ppo.minibatches = parse(key, v)?,
            "ppo.clip_epsilon" => self.ppo.clip_epsilon = parse(key, v)?,
            "ppo.gae_lambda" => self.ppo.gae_lambda = parse(key, v)?,
            "ppo.epochs" | "ppo.epochs_per_update" => self.ppo.epochs = parse(key, v)?,
            "ppo.value_coef" => self.ppo.value_coef = parse(key, v)?,
            "ppo.entropy_coef" => self.ppo.entropy_coef = parse(key, v)?,
            "ppo.max_grad_norm" => self.ppo.max_grad_norm = parse(key, v)?,
            "ppo.total_steps" => self.ppo.total_steps = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides, e.g. from the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        if let SplitRule::Fraction(f) = self.split {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("split.train_fraction {f} must lie in (0, 1)")));
            }
        }
        if self.policy.branch_hidden.is_empty() || self.policy.branch_hidden.contains(&0) {
            return Err(Error::Config("policy.branch_hidden needs positive widths".into()));
        }
        if self.policy.branch_output == 0 || self.policy.trunk_hidden == 0 {
            return Err(Error::Config("policy widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.policy.dropout) {
            return Err(Error::Config("policy.dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
