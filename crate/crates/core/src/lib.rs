//! Multi-frequency continuous-share trading engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`marketdata`]: OHLCVA bars at three frequencies, resampling, alignment,
//!   normalisation and a synthetic market generator.
//! - [`garch`]: GARCH(1,1) filtering, maximum-likelihood fitting and rolling
//!   one-step volatility forecasts.
//! - [`nn`]: dense layers, dropout, backpropagation and Adam.
//! - [`policy`]: the three-branch parallel feature network with Gaussian
//!   policy and value heads.
//! - [`env`]: the trading MDP (lot-sized orders, buy-side tax, excess-return
//!   reward) and the Buy&Hold baseline.
//! - [`ppo`]: rollout collection, GAE and the clipped-surrogate update.
//! - [`evalcli`]: configuration, checkpoints, backtests, metrics and the CLI.

pub mod env;
pub mod error;
pub mod evalcli;
pub mod garch;
pub mod marketdata;
pub mod nn;
pub mod policy;
pub mod ppo;

pub use error::{Error, Result};

/// Random number generator used everywhere randomness is consumed.
///
/// ChaCha8 is portable across platforms and serialisable, so seeded runs and
/// checkpointed RNG state reproduce bit for bit.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
