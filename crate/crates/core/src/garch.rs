//! GARCH(1,1) volatility model.
//!
//! ```text
//! R_t   = mu + a_t
//! a_t   = eps_t * sigma_t,            eps_t ~ N(0, 1)
//! s2_t  = alpha0 + alpha1 * a_{t-1}^2 + beta1 * s2_{t-1}
//! ```
//!
//! The filter starts from the unconditional variance `alpha0 / (1 - alpha1 - beta1)`.
//! Parameters are estimated by Gaussian maximum likelihood with a projected
//! BFGS search over an unconstrained reparameterisation that keeps every
//! iterate inside the stationarity region.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Smallest admissible `alpha0`.
pub const ALPHA0_FLOOR: f64 = 1e-12;
/// Minimum series length accepted by [`fit`].
pub const MIN_FIT_LEN: usize = 50;
/// Lower bound on emitted volatility forecasts.
pub const MIN_SIGMA: f64 = 1e-8;

// Box on the unconstrained coordinates.
const LOGIT_BOUND: f64 = 30.0;
const MAX_ITERATIONS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub mu: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta1: f64,
}

impl GarchParams {
    pub fn new(mu: f64, alpha0: f64, alpha1: f64, beta1: f64) -> Result<Self> {
        let p = GarchParams {
            mu,
            alpha0,
            alpha1,
            beta1,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mu.is_finite()
            && self.alpha0.is_finite()
            && self.alpha0 > 0.0
            && self.alpha1 >= 0.0
            && self.beta1 >= 0.0
            && self.alpha1 + self.beta1 < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "GARCH(1,1) needs alpha0 > 0, alpha1, beta1 >= 0 and alpha1 + beta1 < 1, got {self:?}"
            )))
        }
    }

    pub fn persistence(&self) -> f64 {
        self.alpha1 + self.beta1
    }

    pub fn unconditional_variance(&self) -> f64 {
        self.alpha0 / (1.0 - self.alpha1 - self.beta1)
    }
}

/// Squared innovation and variance of the most recent observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchState {
    pub last_residual_sq: f64,
    pub last_variance: f64,
}

impl GarchState {
    fn validate(&self) -> Result<()> {
        let ok = [self.last_residual_sq, self.last_variance]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("invalid GARCH state {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: GarchParams,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn check_returns(returns: &[f64]) -> Result<()> {
    if returns.is_empty() {
        return Err(Error::SeriesTooShort { len: 0, min: 1 });
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("returns contain NaN or infinity".into()));
    }
    Ok(())
}

/// Conditional variances `s2_1 .. s2_n`, one per return.
pub fn filter_variances(params: &GarchParams, returns: &[f64]) -> Result<Vec<f64>> {
    params.validate()?;
    check_returns(returns)?;
    let mut out = Vec::with_capacity(returns.len());
    let mut var = params.unconditional_variance();
    out.push(var);
    for r in &returns[..returns.len() - 1] {
        let a = r - params.mu;
        var = params.alpha0 + params.alpha1 * a * a + params.beta1 * var;
        out.push(var);
    }
    Ok(out)
}

/// Filter state after the last return, ready for a one-step forecast.
pub fn filter_state(params: &GarchParams, returns: &[f64]) -> Result<GarchState> {
    let variances = filter_variances(params, returns)?;
    let a = returns[returns.len() - 1] - params.mu;
    Ok(GarchState {
        last_residual_sq: a * a,
        last_variance: variances[variances.len() - 1],
    })
}

/// Gaussian log-likelihood `sum_t -ln(2 pi)/2 - ln(s2_t)/2 - a_t^2 / (2 s2_t)`.
pub fn log_likelihood(params: &GarchParams, returns: &[f64]) -> Result<f64> {
    let variances = filter_variances(params, returns)?;
    Ok(returns
        .iter()
        .zip(&variances)
        .map(|(r, v)| {
            let a = r - params.mu;
            -0.5 * LN_2PI - 0.5 * v.ln() - a * a / (2.0 * v)
        })
        .sum())
}

/// Log-likelihood and its gradient with respect to `(mu, alpha0, alpha1, beta1)`.
fn log_likelihood_grad(p: &GarchParams, returns: &[f64]) -> (f64, [f64; 4]) {
    let slack = 1.0 - p.alpha1 - p.beta1;
    let mut var = p.alpha0 / slack;
    // d var / d (mu, alpha0, alpha1, beta1)
    let mut dvar = [0.0, 1.0 / slack, p.alpha0 / (slack * slack), p.alpha0 / (slack * slack)];
    let mut ll = 0.0;
    let mut grad = [0.0; 4];
    let mut prev_a = 0.0;
    for (t, r) in returns.iter().enumerate() {
        if t > 0 {
            let new_dvar = [
                -2.0 * p.alpha1 * prev_a + p.beta1 * dvar[0],
                1.0 + p.beta1 * dvar[1],
                prev_a * prev_a + p.beta1 * dvar[2],
                var + p.beta1 * dvar[3],
            ];
            var = p.alpha0 + p.alpha1 * prev_a * prev_a + p.beta1 * var;
            dvar = new_dvar;
        }
        let a = r - p.mu;
        ll += -0.5 * LN_2PI - 0.5 * var.ln() - a * a / (2.0 * var);
        let dll_dvar = -0.5 / var + a * a / (2.0 * var * var);
        grad[0] += a / var + dll_dvar * dvar[0];
        for k in 1..4 {
            grad[k] += dll_dvar * dvar[k];
        }
        prev_a = a;
    }
    (ll, grad)
}

/// Unconstrained coordinates `(mu, ln alpha0, logit alpha1, logit beta1)`,
/// with `alpha1`, `beta1` and the slack `1 - alpha1 - beta1` a softmax over
/// `(x2, x3, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Unconstrained([f64; 4]);

impl Unconstrained {
    fn lower() -> [f64; 4] {
        [f64::NEG_INFINITY, ALPHA0_FLOOR.ln(), -LOGIT_BOUND, -LOGIT_BOUND]
    }

    fn upper() -> [f64; 4] {
        [f64::INFINITY, 0.0, LOGIT_BOUND, LOGIT_BOUND]
    }

    fn project(mut self) -> Self {
        let (lo, hi) = (Self::lower(), Self::upper());
        for k in 0..4 {
            self.0[k] = self.0[k].clamp(lo[k], hi[k]);
        }
        self
    }

    fn from_params(p: &GarchParams) -> Self {
        let slack = (1.0 - p.alpha1 - p.beta1).max(ALPHA0_FLOOR);
        Unconstrained([
            p.mu,
            p.alpha0.max(ALPHA0_FLOOR).ln(),
            (p.alpha1.max(ALPHA0_FLOOR) / slack).ln(),
            (p.beta1.max(ALPHA0_FLOOR) / slack).ln(),
        ])
        .project()
    }

    fn to_params(self) -> GarchParams {
        let [mu, x0, x1, x2] = self.0;
        let m = x1.max(x2).max(0.0);
        let (e1, e2, e0) = ((x1 - m).exp(), (x2 - m).exp(), (-m).exp());
        let z = e1 + e2 + e0;
        GarchParams {
            mu,
            alpha0: x0.exp(),
            alpha1: e1 / z,
            beta1: e2 / z,
        }
    }

    /// Mean negative log-likelihood and its gradient in these coordinates.
    fn objective(self, returns: &[f64]) -> (f64, [f64; 4]) {
        let p = self.to_params();
        let (ll, g) = log_likelihood_grad(&p, returns);
        let n = returns.len() as f64;
        let (a1, b1) = (p.alpha1, p.beta1);
        let grad = [
            g[0],
            g[1] * p.alpha0,
            g[2] * a1 * (1.0 - a1) - g[3] * a1 * b1,
            -g[2] * a1 * b1 + g[3] * b1 * (1.0 - b1),
        ];
        (-ll / n, grad.map(|v| -v / n))
    }
}

fn sample_moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

fn dot(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximum-likelihood GARCH(1,1) fit.
///
/// Stops with `converged = true` once both the parameter step (max norm, in
/// unconstrained coordinates) and the relative objective change fall below
/// `tol`, or the projected gradient vanishes. Hitting the iteration cap or a
/// failed line search returns the best point so far with `converged = false`.
pub fn fit(returns: &[f64], init: Option<GarchParams>, tol: f64) -> Result<FitReport> {
    if returns.len() < MIN_FIT_LEN {
        return Err(Error::SeriesTooShort {
            len: returns.len(),
            min: MIN_FIT_LEN,
        });
    }
    check_returns(returns)?;
    let start = match init {
        Some(p) => {
            p.validate()?;
            p
        }
        None => {
            let (mean, var) = sample_moments(returns);
            GarchParams {
                mu: mean,
                alpha0: (var * 0.05).max(ALPHA0_FLOOR),
                alpha1: 0.05,
                beta1: 0.90,
            }
        }
    };

    let mut x = Unconstrained::from_params(&start);
    let (mut f, mut g) = x.objective(returns);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "log-likelihood at initial parameters {start:?} is not finite"
        )));
    }

    let identity = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    let mut h_inv = identity;
    let mut converged = false;
    let mut iterations = 0;
    let (lo, hi) = (Unconstrained::lower(), Unconstrained::upper());

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let current = x.to_params();
        assert!(
            current.alpha1 + current.beta1 < 1.0,
            "optimizer left the stationarity region: {current:?}"
        );

        // Coordinates pinned at a bound with the gradient pushing outward are frozen.
        let free: [bool; 4] = std::array::from_fn(|k| {
            !((x.0[k] <= lo[k] && g[k] > 0.0) || (x.0[k] >= hi[k] && g[k] < 0.0))
        });
        let pg: [f64; 4] = std::array::from_fn(|k| if free[k] { g[k] } else { 0.0 });
        if pg.iter().map(|v| v.abs()).fold(0.0, f64::max) < tol * 1e-2 {
            converged = true;
            break;
        }

        let mut dir: [f64; 4] = std::array::from_fn(|i| -dot(&h_inv[i], &pg));
        for k in 0..4 {
            if !free[k] {
                dir[k] = 0.0;
            }
        }
        if dot(&dir, &pg) >= 0.0 {
            h_inv = identity;
            dir = pg.map(|v| -v);
        }

        // Backtracking Armijo search along the projected path.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = Unconstrained(std::array::from_fn(|k| x.0[k] + step * dir[k])).project();
            let delta: [f64; 4] = std::array::from_fn(|k| trial.0[k] - x.0[k]);
            let (ft, gt) = trial.objective(returns);
            if ft.is_finite() && ft <= f + 1e-4 * dot(&pg, &delta) {
                accepted = Some((trial, ft, gt, delta));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, ft, gt, delta)) = accepted else {
            if h_inv != identity {
                h_inv = identity;
                continue;
            }
            break;
        };

        let df = f - ft;
        let s = delta;
        let y: [f64; 4] = std::array::from_fn(|k| gt[k] - g[k]);
        let sy = dot(&s, &y);
        if sy > 1e-16 {
            // BFGS inverse-Hessian update.
            let rho = 1.0 / sy;
            let hy: [f64; 4] = std::array::from_fn(|i| dot(&h_inv[i], &y));
            let yhy = dot(&y, &hy);
            for i in 0..4 {
                for j in 0..4 {
                    h_inv[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        x = trial;
        f = ft;
        g = gt;

        let step_norm = s.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if step_norm < tol && df.abs() < tol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
    }

    let params = x.to_params();
    Ok(FitReport {
        params,
        log_likelihood: -f * returns.len() as f64,
        iterations,
        converged,
    })
}

/// `sqrt(alpha0 + alpha1 * a^2 + beta1 * s2)` for the next period.
pub fn forecast_one_step(params: &GarchParams, state: &GarchState) -> Result<f64> {
    params.validate()?;
    state.validate()?;
    Ok((params.alpha0 + params.alpha1 * state.last_residual_sq + params.beta1 * state.last_variance).sqrt())
}

/// Output of [`rolling_forecast`].
#[derive(Debug, Clone, PartialEq)]
pub struct RollingForecast {
    /// One forecast per input return; entry `t` uses returns before `t` only.
    pub sigma: Vec<f64>,
    /// Every fit performed, in order.
    pub fits: Vec<FitReport>,
    /// Fits that failed and fell back to earlier parameters.
    pub warnings: Vec<String>,
}

/// Rolling one-step-ahead volatility forecasts.
///
/// For `t >= window` the model is refit on `returns[t - window..t]` every
/// `refit_every` days (warm-started from the previous fit), the window is
/// filtered and the next-day sigma emitted. Earlier days get the sample
/// standard deviation of the returns seen so far.
pub fn rolling_forecast(returns: &[f64], window: usize, refit_every: usize) -> Result<RollingForecast> {
    rolling_forecast_with_tol(returns, window, refit_every, 1e-8)
}

pub fn rolling_forecast_with_tol(
    returns: &[f64],
    window: usize,
    refit_every: usize,
    tol: f64,
) -> Result<RollingForecast> {
    if window < MIN_FIT_LEN {
        return Err(Error::InvalidParams(format!(
            "rolling window {window} below the minimum of {MIN_FIT_LEN}"
        )));
    }
    if refit_every == 0 {
        return Err(Error::InvalidParams("refit_every must be at least 1".into()));
    }
    check_returns(returns)?;

    let mut sigma = Vec::with_capacity(returns.len());
    let mut fits = Vec::new();
    let mut warnings = Vec::new();
    let mut params: Option<GarchParams> = None;

    for t in 0..returns.len() {
        let history = &returns[..t];
        let warm_up = || {
            if history.len() < 2 {
                MIN_SIGMA
            } else {
                sample_moments(history).1.sqrt().max(MIN_SIGMA)
            }
        };
        if t < window {
            sigma.push(warm_up());
            continue;
        }
        let slice = &returns[t - window..t];
        if (t - window) % refit_every == 0 {
            match fit(slice, params, tol) {
                Ok(report) => {
                    params = Some(report.params);
                    fits.push(report);
                }
                Err(e) => warnings.push(format!("day {t}: fit failed ({e}), keeping previous parameters")),
            }
        }
        let s = match &params {
            Some(p) => {
                let state = filter_state(p, slice)?;
                forecast_one_step(p, &state)?.max(MIN_SIGMA)
            }
            None => warm_up(),
        };
        sigma.push(s);
    }
    Ok(RollingForecast {
        sigma,
        fits,
        warnings,
    })
}

/// Simulates `n` returns from the model, starting at the unconditional variance.
pub fn simulate(params: &GarchParams, n: usize, rng: &mut crate::Rng) -> Result<Vec<f64>> {
    params.validate()?;
    let mut out = Vec::with_capacity(n);
    let mut var = params.unconditional_variance();
    let mut prev_a: f64 = 0.0;
    for t in 0..n {
        if t > 0 {
            var = params.alpha0 + params.alpha1 * prev_a * prev_a + params.beta1 * var;
        }
        let z: f64 = rng.sample(StandardNormal);
        let a = var.sqrt() * z;
        out.push(params.mu + a);
        prev_a = a;
    }
    Ok(out)
}
