//! Data preparation and training runs shared by the CLI and the tests.

use std::path::Path;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::{RunConfig, SplitRule};
use crate::env::TradingEnv;
use crate::error::{Error, Result};
use crate::garch::{rolling_forecast, RollingForecast};
use crate::marketdata::{
    align, daily_log_returns, fit_normalizer, load_bars, load_sigma, resample, AlignedDataset, BarSeries, Frequency,
    NormStats,
};
use crate::policy::PolicyParams;
use crate::ppo::{TrainLogRow, Trainer};

/// Rolling GARCH sigma for the daily bars of `five_min`.
pub fn fit_sigma(five_min: &BarSeries, cfg: &RunConfig) -> Result<(BarSeries, RollingForecast)> {
    let (daily, _) = resample(five_min)?;
    let returns = daily_log_returns(&daily);
    let forecast = rolling_forecast(&returns, cfg.garch_window, cfg.garch_refit_every)?;
    Ok((daily, forecast))
}

/// Resamples and aligns; `sigma` (one value per daily bar) is computed when
/// absent.
pub fn build_dataset(five_min: BarSeries, sigma: Option<Vec<f64>>, cfg: &RunConfig) -> Result<AlignedDataset> {
    let (daily, weekly) = resample(&five_min)?;
    let sigma = match sigma {
        Some(s) => s,
        None => rolling_forecast(&daily_log_returns(&daily), cfg.garch_window, cfg.garch_refit_every)?.sigma,
    };
    align(five_min, daily, weekly, sigma)
}

/// Loads a five-minute CSV and, optionally, a sigma CSV whose dates must
/// match the resampled daily bars.
pub fn load_market(data: &Path, sigma: Option<&Path>, cfg: &RunConfig) -> Result<AlignedDataset> {
    let five = load_bars(data, Frequency::FiveMin)?;
    let sigma = match sigma {
        None => None,
        Some(p) => {
            let (sigma_days, values) = load_sigma(p)?;
            let (daily, _) = resample(&five)?;
            let same = sigma_days.len() == daily.len()
                && sigma_days.bars().iter().zip(daily.bars()).all(|(a, b)| a.date() == b.date());
            if !same {
                return Err(Error::Data(format!(
                    "{}: sigma dates do not match the daily bars of {}",
                    p.display(),
                    data.display()
                )));
            }
            Some(values)
        }
    };
    build_dataset(five, sigma, cfg)
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: AlignedDataset,
    pub test: AlignedDataset,
    /// Fit on the training days only.
    pub norm: NormStats,
}

pub fn split_dataset(ds: &AlignedDataset, cfg: &RunConfig) -> Result<Splits> {
    let (train, test) = match cfg.split {
        SplitRule::Boundary(date) => ds.split(date)?,
        SplitRule::Fraction(f) => {
            let k = ((ds.len() as f64) * f).round() as usize;
            if k < 2 || k + 2 > ds.len() {
                return Err(Error::Data(format!(
                    "train fraction {f} of {} days leaves a segment under two days",
                    ds.len()
                )));
            }
            ds.split_at(k)
        }
    };
    if train.len() < 2 || test.len() < 2 {
        return Err(Error::Data("both segments need at least two trading days".into()));
    }
    let norm = fit_normalizer(&train, 0..train.len())?;
    Ok(Splits { train, test, norm })
}

pub const TRAIN_LOG_HEADER: &str = "update,steps,mean_ep_reward,policy_loss,value_loss,entropy,clip_frac,approx_kl";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
}

fn snapshot(t: &Trainer, cfg: &RunConfig, norm: &NormStats) -> Checkpoint {
    Checkpoint {
        policy: t.policy.clone(),
        policy_config: cfg.policy.clone(),
        ppo: t.config.clone(),
        adam: t.adam.clone(),
        steps: t.steps,
        updates: t.updates,
        rng: t.rng.clone(),
        norm: norm.clone(),
    }
}

/// Trains `cfg.variant` on the whole of `train`. With `out_dir`, writes
/// `train_log.csv`, periodic `checkpoint_NNNNN.json` and `checkpoint_final.json`.
pub fn train_variant(train: &AlignedDataset, norm: &NormStats, cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut rng = crate::seeded_rng(cfg.seed);
    let policy = PolicyParams::new(cfg.variant.clone(), &cfg.policy, &mut rng)?;
    let mut env_cfg = cfg.env.clone();
    env_cfg.day_range = 0..train.len();
    let env = TradingEnv::new(train.clone(), Some(norm.clone()), env_cfg)?;
    let mut trainer = Trainer::new(policy, env, cfg.ppo.clone(), rng)?;

    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.csv");
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
            w.write_record(TRAIN_LOG_HEADER.split(','))?;
            Some(w)
        }
        None => None,
    };
    let log = trainer.train(|t, row| {
        if let (Some(w), Some(dir)) = (writer.as_mut(), out_dir) {
            w.serialize(row)?;
            w.flush().map_err(|e| Error::io(dir, e))?;
            if cfg.checkpoint_every > 0 && t.updates % cfg.checkpoint_every == 0 {
                save_checkpoint(&snapshot(t, cfg, norm), dir.join(format!("checkpoint_{:05}.json", t.updates)))?;
            }
        }
        Ok(())
    })?;
    let checkpoint = snapshot(&trainer, cfg, norm);
    if let Some(dir) = out_dir {
        save_checkpoint(&checkpoint, dir.join("checkpoint_final.json"))?;
    }
    Ok(TrainOutcome { checkpoint, log })
}
