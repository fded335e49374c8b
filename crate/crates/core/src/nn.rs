//! Small dense-network core in 64-bit floating point.
//!
//! Parameters of every trainable object are exposed as a list of flat slices
//! through [`Parameters`]; gradients use the same type as the parameters, so
//! optimizers and gradient utilities only ever zip slices.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Gaussian init with standard deviation `gain / sqrt(inputs)`, zero bias.
    pub fn random(inputs: usize, outputs: usize, activation: Activation, gain: f64, rng: &mut Rng) -> Self {
        let sd = gain / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        DenseLayer {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.inputs * self.outputs || self.bias.len() != self.outputs {
            return Err(Error::Shape(format!(
                "layer {}x{} holds {} weights and {} biases",
                self.outputs,
                self.inputs,
                self.weights.len(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }
}

/// How dropout behaves during a forward pass.
pub enum Mode<'a> {
    /// No dropout; pure function of the input.
    Eval,
    /// Fresh inverted-dropout masks drawn from the generator.
    Train(&'a mut Rng),
    /// Reuse masks recorded by an earlier forward (one entry per layer).
    Replay(&'a [Option<Vec<f64>>]),
}

impl Mode<'_> {
    pub fn is_eval(&self) -> bool {
        matches!(self, Mode::Eval)
    }

    /// Reborrows the mode so it can be passed to several forwards in turn.
    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(rng) => Mode::Train(rng),
            Mode::Replay(m) => Mode::Replay(m),
        }
    }
}

/// Intermediate values of one forward pass, consumed by [`Network::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
    /// Inverted-dropout masks (entries 0 or 1/keep) applied after each layer.
    pub masks: Vec<Option<Vec<f64>>>,
    pub train: bool,
}

/// A chain of dense layers, each optionally followed by dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<DenseLayer>,
    dropout: Vec<f64>,
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>, dropout: Vec<f64>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        if dropout.len() != layers.len() {
            return Err(Error::Shape(format!(
                "{} dropout rates for {} layers",
                dropout.len(),
                layers.len()
            )));
        }
        for l in &layers {
            l.check()?;
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::Shape(format!(
                    "layer emits {} values but the next expects {}",
                    w[0].outputs, w[1].inputs
                )));
            }
        }
        if let Some(r) = dropout.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::InvalidParams(format!("dropout rate {r} must lie in [0, 1)")));
        }
        Ok(Network { layers, dropout })
    }

    /// Randomly initialised MLP over `sizes` (input first). Hidden layers use
    /// `hidden`, the last layer is linear with init gain `output_gain`, and
    /// `dropout` (layer index, rate) places one dropout after that layer.
    pub fn mlp(
        sizes: &[usize],
        hidden: Activation,
        output_gain: f64,
        dropout: Option<(usize, f64)>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Shape("an MLP needs input and output sizes".into()));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let last = i + 1 == n;
                let (act, gain) = if last {
                    (Activation::Identity, output_gain)
                } else {
                    (hidden, 1.0)
                };
                DenseLayer::random(sizes[i], sizes[i + 1], act, gain, rng)
            })
            .collect();
        let mut rates = vec![0.0; n];
        if let Some((i, rate)) = dropout {
            if i >= n {
                return Err(Error::Shape(format!("dropout after layer {i} of {n}")));
            }
            rates[i] = rate;
        }
        Network::new(layers, rates)
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn dropout_rates(&self) -> &[f64] {
        &self.dropout
    }

    pub fn forward(&self, input: &[f64], mut mode: Mode<'_>) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.input_size() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_size(),
                input.len()
            )));
        }
        if let Mode::Replay(masks) = &mode {
            if masks.len() != self.layers.len() {
                return Err(Error::Shape("replayed masks do not match the network".into()));
            }
        }
        let n = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n),
            pre_activations: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
            train: !mode.is_eval(),
        };
        let mut h = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(&h, &mut z);
            let mut a: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            let rate = self.dropout[i];
            let mask = match &mut mode {
                Mode::Eval => None,
                Mode::Train(rng) if rate > 0.0 => {
                    if rate >= 1.0 {
                        return Err(Error::InvalidParams("dropout keep probability is zero".into()));
                    }
                    let keep = 1.0 - rate;
                    Some(
                        (0..a.len())
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect::<Vec<f64>>(),
                    )
                }
                Mode::Train(_) => None,
                Mode::Replay(masks) => masks[i].clone(),
            };
            if let Some(m) = &mask {
                if m.len() != a.len() {
                    return Err(Error::Shape("dropout mask length mismatch".into()));
                }
                for (v, k) in a.iter_mut().zip(m) {
                    *v *= k;
                }
            }
            cache.inputs.push(h);
            cache.pre_activations.push(z);
            cache.masks.push(mask);
            h = a;
        }
        Ok((h, cache))
    }

    /// Reverse-mode pass; accumulates parameter gradients into `grads` and
    /// returns the gradient with respect to the input.
    pub fn backward_into(&self, cache: &ForwardCache, grad_output: &[f64], grads: &mut Network) -> Result<Vec<f64>> {
        if cache.inputs.len() != self.layers.len()
            || grads.layers.len() != self.layers.len()
            || grad_output.len() != self.output_size()
        {
            return Err(Error::Shape("backward: cache, gradient or output size mismatch".into()));
        }
        let mut g = grad_output.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let gl = &mut grads.layers[i];
            if let Some(m) = &cache.masks[i] {
                for (v, k) in g.iter_mut().zip(m) {
                    *v *= k;
                }
            }
            let dz: Vec<f64> = g
                .iter()
                .zip(&cache.pre_activations[i])
                .map(|(gv, &z)| gv * layer.activation.derivative(z))
                .collect();
            let x = &cache.inputs[i];
            let mut gin = vec![0.0; layer.inputs];
            for (j, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                gl.bias[j] += d;
                let row = j * layer.inputs..(j + 1) * layer.inputs;
                for ((gw, xv), (w, gi)) in gl.weights[row.clone()]
                    .iter_mut()
                    .zip(x)
                    .zip(layer.weights[row].iter().zip(gin.iter_mut()))
                {
                    *gw += d * xv;
                    *gi += d * w;
                }
            }
            g = gin;
        }
        Ok(g)
    }

    /// Parameter gradients and input gradient for one cached forward.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &[f64]) -> Result<(Network, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let gin = self.backward_into(cache, grad_output, &mut grads)?;
        Ok((grads, gin))
    }
}

/// Anything exposing its trainable values as flat slices in a fixed order.
pub trait Parameters {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;
    /// Same shape, all values zero; used as a gradient accumulator.
    fn zeros_like(&self) -> Self;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
    }

    fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl Parameters for Network {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weights[..], &l.bias[..]])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights[..], &mut l.bias[..]])
            .collect()
    }

    fn zeros_like(&self) -> Self {
        Network {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.inputs, l.outputs, l.activation))
                .collect(),
            dropout: self.dropout.clone(),
        }
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut impl Parameters, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &impl Parameters, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One bias-corrected Adam update of `params` along `grads`.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let gs = grads.slices();
        let ps = params.slices_mut();
        let shapes_match = ps.len() == gs.len()
            && ps.len() == self.first_moment.len()
            && ps
                .iter()
                .zip(&gs)
                .zip(&self.first_moment)
                .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
        if !shapes_match {
            return Err(Error::Shape("Adam: parameter, gradient and moment shapes differ".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in ps
            .into_iter()
            .zip(gs)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Relative error used by the gradient checks: `|a - n| / max(|a|, |n|, floor)`.
/// The floor keeps gradients that are zero up to finite-difference noise from
/// dominating the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-4;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Central-difference check of [`Network::backward`] over every parameter.
///
/// `loss` maps the network output to a scalar and its gradient. Dropout masks
/// come from `masks` when given (frozen), otherwise the network runs in eval
/// mode. Returns the maximum relative error.
pub fn grad_check(
    net: &Network,
    input: &[f64],
    masks: Option<&[Option<Vec<f64>>]>,
    loss: &dyn Fn(&[f64]) -> (f64, Vec<f64>),
) -> Result<f64> {
    let mode = || match masks {
        Some(m) => Mode::Replay(m),
        None => Mode::Eval,
    };
    let (out, cache) = net.forward(input, mode())?;
    let (_, dloss) = loss(&out);
    let (grads, _) = net.backward(&cache, &dloss)?;
    let analytic = grads.to_flat();

    let h = 1e-5;
    let base = net.to_flat();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        let mut eval_at = |v: f64| -> Result<f64> {
            let mut flat = base.clone();
            flat[k] = v;
            probe.set_flat(&flat);
            let (o, _) = probe.forward(input, mode())?;
            Ok(loss(&o).0)
        };
        let numeric = (eval_at(base[k] + h)? - eval_at(base[k] - h)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic[k], numeric));
    }
    Ok(worst)
}
