//! Parallel three-branch policy.
//!
//! Each enabled frequency window is flattened and passed through its own MLP
//! (input -> 32 -> 16 -> 16 by default, dropout after the second hidden
//! layer). Branch outputs are scaled elementwise by learned 16-vectors and
//! concatenated in short, mid, long order into the shared state. A policy
//! trunk maps the state to the mean of a Gaussian over the raw action; a value
//! trunk maps the same state to a scalar value estimate. The standard deviation
//! is a single state-independent parameter.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marketdata::{Observation, BARS_PER_DAY, BAR_FEATURES, LONG_ROWS, MID_FEATURES, MID_ROWS};
use crate::nn::{Activation, ForwardCache, Mode, Network, Parameters};
use crate::Rng;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BranchKind {
    Short,
    Mid,
    Long,
}

impl BranchKind {
    pub const ALL: [BranchKind; 3] = [BranchKind::Short, BranchKind::Mid, BranchKind::Long];

    pub fn input_size(self, garch_feature: bool) -> usize {
        match self {
            BranchKind::Short => BARS_PER_DAY * BAR_FEATURES,
            BranchKind::Mid if garch_feature => MID_ROWS * MID_FEATURES,
            BranchKind::Mid => MID_ROWS * BAR_FEATURES,
            BranchKind::Long => LONG_ROWS * BAR_FEATURES,
        }
    }

    /// Flattened branch input; without the GARCH feature the sigma column of
    /// the mid window is dropped.
    pub fn flatten(self, obs: &Observation, garch_feature: bool) -> Vec<f64> {
        match self {
            BranchKind::Short => obs.short.as_slice().to_vec(),
            BranchKind::Mid if garch_feature => obs.mid.as_slice().to_vec(),
            BranchKind::Mid => (0..MID_ROWS)
                .flat_map(|r| obs.mid.row(r)[..BAR_FEATURES].iter().copied())
                .collect(),
            BranchKind::Long => obs.long.as_slice().to_vec(),
        }
    }
}

/// Which branches are wired in and whether the daily window carries sigma.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub branches: Vec<BranchKind>,
    pub garch_feature: bool,
}

impl VariantConfig {
    pub fn new(mut branches: Vec<BranchKind>, garch_feature: bool) -> Result<Self> {
        branches.sort();
        branches.dedup();
        if branches.is_empty() {
            return Err(Error::InvalidParams("at least one branch must be enabled".into()));
        }
        Ok(VariantConfig {
            branches,
            garch_feature,
        })
    }

    pub fn dnn() -> Self {
        VariantConfig {
            branches: vec![BranchKind::Mid],
            garch_feature: false,
        }
    }

    pub fn dnn_garch() -> Self {
        VariantConfig {
            branches: vec![BranchKind::Mid],
            garch_feature: true,
        }
    }

    pub fn mct() -> Self {
        VariantConfig {
            branches: BranchKind::ALL.to_vec(),
            garch_feature: false,
        }
    }

    pub fn mctg() -> Self {
        VariantConfig {
            branches: BranchKind::ALL.to_vec(),
            garch_feature: true,
        }
    }

    pub fn presets() -> [(&'static str, VariantConfig); 4] {
        [
            ("DNN", Self::dnn()),
            ("DNN-GARCH", Self::dnn_garch()),
            ("MCT", Self::mct()),
            ("MCTG", Self::mctg()),
        ]
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::presets()
            .into_iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Config(format!("unknown variant {name:?}; expected DNN, DNN-GARCH, MCT or MCTG")))
    }

    pub fn name(&self) -> String {
        Self::presets()
            .into_iter()
            .find(|(_, v)| v == self)
            .map(|(n, _)| n.to_string())
            .unwrap_or_else(|| {
                let b: Vec<String> = self.branches.iter().map(|b| format!("{b:?}")).collect();
                format!("{}{}", b.join("+"), if self.garch_feature { "+GARCH" } else { "" })
            })
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub branch_hidden: Vec<usize>,
    pub branch_output: usize,
    pub trunk_hidden: usize,
    pub dropout: f64,
    pub init_log_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            branch_hidden: vec![32, 16],
            branch_output: 16,
            trunk_hidden: 32,
            dropout: 0.25,
            init_log_std: -0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub kind: BranchKind,
    pub net: Network,
    /// Elementwise multiplier on the branch output.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub variant: VariantConfig,
    pub branches: Vec<Branch>,
    pub policy_trunk: Network,
    pub value_trunk: Network,
    /// Single-element so it can be exposed as a parameter slice.
    pub log_std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutput {
    pub action_mean: f64,
    pub action_std: f64,
    pub value: f64,
}

impl PolicyOutput {
    pub fn log_std(&self) -> f64 {
        self.action_std.ln()
    }

    /// Action used for evaluation: the clipped mean.
    pub fn deterministic_action(&self) -> f64 {
        self.action_mean.clamp(-1.0, 1.0)
    }
}

/// Everything needed to backpropagate one [`PolicyParams::forward`].
#[derive(Debug, Clone)]
pub struct PolicyCache {
    branch_caches: Vec<ForwardCache>,
    branch_outputs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    policy_cache: ForwardCache,
    value_cache: ForwardCache,
}

impl PolicyCache {
    /// Dropout masks of every branch, for replaying the same forward.
    pub fn masks(&self) -> Vec<Vec<Option<Vec<f64>>>> {
        self.branch_caches.iter().map(|c| c.masks.clone()).collect()
    }
}

/// Upstream gradients on the policy outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OutputGrad {
    pub d_mean: f64,
    pub d_value: f64,
    /// Gradient with respect to the (unclamped) log standard deviation.
    pub d_log_std: f64,
}

impl PolicyParams {
    pub fn new(variant: VariantConfig, config: &PolicyConfig, rng: &mut Rng) -> Result<Self> {
        if config.branch_hidden.is_empty() {
            return Err(Error::InvalidParams("branch networks need a hidden layer".into()));
        }
        let mut branches = Vec::with_capacity(variant.branches.len());
        for &kind in &variant.branches {
            let mut sizes = vec![kind.input_size(variant.garch_feature)];
            sizes.extend(&config.branch_hidden);
            sizes.push(config.branch_output);
            let dropout_at = config.branch_hidden.len() - 1;
            let dropout = (config.dropout > 0.0).then_some((dropout_at, config.dropout));
            branches.push(Branch {
                kind,
                net: Network::mlp(&sizes, Activation::Tanh, 1.0, dropout, rng)?,
                weights: vec![1.0; config.branch_output],
            });
        }
        let state_dim = config.branch_output * branches.len();
        let policy_trunk = Network::mlp(&[state_dim, config.trunk_hidden, 1], Activation::Tanh, 0.01, None, rng)?;
        let value_trunk = Network::mlp(&[state_dim, config.trunk_hidden, 1], Activation::Tanh, 1.0, None, rng)?;
        Ok(PolicyParams {
            variant,
            branches,
            policy_trunk,
            value_trunk,
            log_std: vec![config.init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)],
        })
    }

    pub fn state_dim(&self) -> usize {
        self.branches.iter().map(|b| b.weights.len()).sum()
    }

    pub fn action_std(&self) -> f64 {
        self.log_std[0].clamp(LOG_STD_MIN, LOG_STD_MAX).exp()
    }

    /// Keeps `log_std` inside its clamp range after an optimizer step.
    pub fn project(&mut self) {
        self.log_std[0] = self.log_std[0].clamp(LOG_STD_MIN, LOG_STD_MAX);
    }

    /// Runs every branch and builds the concatenated, weighted state.
    pub fn assemble_state(&self, obs: &Observation, mut mode: Mode<'_>) -> Result<(Vec<f64>, Vec<ForwardCache>, Vec<Vec<f64>>)> {
        let mut state = Vec::with_capacity(self.state_dim());
        let mut caches = Vec::with_capacity(self.branches.len());
        let mut outputs = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let input = branch.kind.flatten(obs, self.variant.garch_feature);
            let (out, cache) = branch.net.forward(&input, mode.reborrow())?;
            if out.len() != branch.weights.len() {
                return Err(Error::Shape(format!(
                    "branch {:?} emits {} values for {} weights",
                    branch.kind,
                    out.len(),
                    branch.weights.len()
                )));
            }
            state.extend(out.iter().zip(&branch.weights).map(|(o, w)| o * w));
            caches.push(cache);
            outputs.push(out);
        }
        Ok((state, caches, outputs))
    }

    /// Forward with per-branch replayed masks (for frozen-dropout checks).
    pub fn forward_replay(&self, obs: &Observation, masks: &[Vec<Option<Vec<f64>>>]) -> Result<(PolicyOutput, PolicyCache)> {
        if masks.len() != self.branches.len() {
            return Err(Error::Shape("one mask set per branch expected".into()));
        }
        let mut state = Vec::with_capacity(self.state_dim());
        let mut caches = Vec::new();
        let mut outputs = Vec::new();
        for (branch, m) in self.branches.iter().zip(masks) {
            let input = branch.kind.flatten(obs, self.variant.garch_feature);
            let (out, cache) = branch.net.forward(&input, Mode::Replay(m))?;
            state.extend(out.iter().zip(&branch.weights).map(|(o, w)| o * w));
            caches.push(cache);
            outputs.push(out);
        }
        self.heads(state, caches, outputs)
    }

    pub fn forward(&self, obs: &Observation, mode: Mode<'_>) -> Result<(PolicyOutput, PolicyCache)> {
        let (state, caches, outputs) = self.assemble_state(obs, mode)?;
        self.heads(state, caches, outputs)
    }

    fn heads(&self, state: Vec<f64>, branch_caches: Vec<ForwardCache>, branch_outputs: Vec<Vec<f64>>) -> Result<(PolicyOutput, PolicyCache)> {
        let (mean, policy_cache) = self.policy_trunk.forward(&state, Mode::Eval)?;
        let (value, value_cache) = self.value_trunk.forward(&state, Mode::Eval)?;
        let out = PolicyOutput {
            action_mean: mean[0],
            action_std: self.action_std(),
            value: value[0],
        };
        Ok((
            out,
            PolicyCache {
                branch_caches,
                branch_outputs,
                state,
                policy_cache,
                value_cache,
            },
        ))
    }

    /// Eval-mode forward returning only the outputs.
    pub fn evaluate(&self, obs: &Observation) -> Result<PolicyOutput> {
        Ok(self.forward(obs, Mode::Eval)?.0)
    }

    /// Accumulates parameter gradients for one forward into `grads`.
    pub fn backward_into(&self, cache: &PolicyCache, upstream: OutputGrad, grads: &mut PolicyParams) -> Result<()> {
        let mut d_state = self
            .policy_trunk
            .backward_into(&cache.policy_cache, &[upstream.d_mean], &mut grads.policy_trunk)?;
        let d_value_state = self
            .value_trunk
            .backward_into(&cache.value_cache, &[upstream.d_value], &mut grads.value_trunk)?;
        for (a, b) in d_state.iter_mut().zip(&d_value_state) {
            *a += b;
        }
        let mut offset = 0;
        for (i, branch) in self.branches.iter().enumerate() {
            let width = branch.weights.len();
            let seg = &d_state[offset..offset + width];
            let raw = &cache.branch_outputs[i];
            let gb = &mut grads.branches[i];
            let mut d_out = Vec::with_capacity(width);
            for k in 0..width {
                gb.weights[k] += seg[k] * raw[k];
                d_out.push(seg[k] * branch.weights[k]);
            }
            branch.net.backward_into(&cache.branch_caches[i], &d_out, &mut gb.net)?;
            offset += width;
        }
        grads.log_std[0] += upstream.d_log_std;
        Ok(())
    }
}

impl Parameters for PolicyParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for b in &self.branches {
            out.extend(b.net.slices());
            out.push(&b.weights[..]);
        }
        out.extend(self.policy_trunk.slices());
        out.extend(self.value_trunk.slices());
        out.push(&self.log_std[..]);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for b in &mut self.branches {
            out.extend(b.net.slices_mut());
            out.push(&mut b.weights[..]);
        }
        out.extend(self.policy_trunk.slices_mut());
        out.extend(self.value_trunk.slices_mut());
        out.push(&mut self.log_std[..]);
        out
    }

    fn zeros_like(&self) -> Self {
        PolicyParams {
            variant: self.variant.clone(),
            branches: self
                .branches
                .iter()
                .map(|b| Branch {
                    kind: b.kind,
                    net: b.net.zeros_like(),
                    weights: vec![0.0; b.weights.len()],
                })
                .collect(),
            policy_trunk: self.policy_trunk.zeros_like(),
            value_trunk: self.value_trunk.zeros_like(),
            log_std: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledAction {
    /// Pre-clip Gaussian draw.
    pub raw: f64,
    /// `raw` clipped to [-1, 1].
    pub action: f64,
    pub log_prob: f64,
}

/// Draws `u ~ N(mean, std)`, clips to [-1, 1] and reports the log-density of
/// the unclipped draw.
pub fn sample_action(out: &PolicyOutput, rng: &mut Rng) -> SampledAction {
    let z: f64 = rng.sample(StandardNormal);
    let raw = out.action_mean + out.action_std * z;
    SampledAction {
        raw,
        action: raw.clamp(-1.0, 1.0),
        log_prob: gaussian_log_prob(out.action_mean, out.action_std, raw),
    }
}

pub fn gaussian_log_prob(mean: f64, std: f64, x: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * PI).ln()
}

/// `(log_prob, entropy)` of the stored raw action under `out`.
pub fn log_prob_and_entropy(out: &PolicyOutput, raw_action: f64) -> (f64, f64) {
    let entropy = 0.5 * (2.0 * PI * std::f64::consts::E).ln() + out.action_std.ln();
    (gaussian_log_prob(out.action_mean, out.action_std, raw_action), entropy)
}

/// Gradients of `log N(raw; mean, std)` with respect to `(mean, log_std)`.
pub fn log_prob_grad(out: &PolicyOutput, raw_action: f64) -> (f64, f64) {
    let var = out.action_std * out.action_std;
    let d = raw_action - out.action_mean;
    (d / var, d * d / var - 1.0)
}
