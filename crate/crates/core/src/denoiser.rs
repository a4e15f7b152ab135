//! Mean-parameterized denoiser: a fully connected network from a partially masked
//! sequence to one categorical distribution over clean tokens per position.
//!
//! Inputs are per-position one-hots of width `V_l + 1` (the extra slot is MASK),
//! concatenated, with `t` appended when the network is time conditioned. Each
//! position owns a slice of the output layer and a softmax over it. Positions that
//! are observed in the input are carried over: their output is the point mass on
//! the observed token and they receive no gradient.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_process::{SequenceState, Token};
use crate::schedule::MultivariateSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub vocab_sizes: Vec<usize>,
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub time_conditioned: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl DenoiserConfig {
    pub fn new(vocab_sizes: Vec<usize>, hidden_dims: Vec<usize>) -> Self {
        Self { vocab_sizes, hidden_dims, time_conditioned: false, activation: Activation::Tanh }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_sizes.is_empty() || self.vocab_sizes.contains(&0) {
            return Err(Error::Config("vocab sizes must be nonempty and positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims must be nonempty and every width >= 1".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab_sizes.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.vocab_sizes.iter().map(|v| v + 1).sum::<usize>() + self.time_conditioned as usize
    }

    pub fn output_dim(&self) -> usize {
        self.vocab_sizes.iter().sum()
    }

    /// `(fan_in, fan_out)` of every dense layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim());
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    weights: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Network weights stored as one flat vector; each layer is a row-major
/// `fan_out x fan_in` matrix followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    vocab: Arc<[usize]>,
    flat: Vec<f64>,
    head_offsets: Vec<usize>,
    input_offsets: Vec<usize>,
}

/// Per-position categorical distributions over clean tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalOutput {
    pub probs: Vec<Vec<f64>>,
    pub log_probs: Vec<Vec<f64>>,
}

impl CategoricalOutput {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn log_prob(&self, l: usize, k: usize) -> f64 {
        self.log_probs[l][k]
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    active_inputs: Vec<usize>,
    time_feature: Option<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    masked: Vec<bool>,
}

fn layout(config: &DenoiserConfig) -> Vec<LayerSlot> {
    let mut off = 0;
    config
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let slot = LayerSlot { weights: off, bias: off + fan_in * fan_out, fan_in, fan_out };
            off += fan_in * fan_out + fan_out;
            slot
        })
        .collect()
}

fn prefix_offsets(sizes: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    sizes
        .map(|s| {
            let o = acc;
            acc += s;
            o
        })
        .collect()
}

impl DenoiserParams {
    fn from_parts(config: DenoiserConfig, flat: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if flat.len() != config.parameter_count() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", config.parameter_count(), flat.len())));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        let vocab: Arc<[usize]> = Arc::from(config.vocab_sizes.as_slice());
        let head_offsets = prefix_offsets(config.vocab_sizes.iter().copied());
        let input_offsets = prefix_offsets(config.vocab_sizes.iter().map(|v| v + 1));
        Ok(Self { config, vocab, flat, head_offsets, input_offsets })
    }

    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut flat = vec![0.0; config.parameter_count()];
        for slot in layout(&config) {
            let bound = 1.0 / (slot.fan_in as f64).sqrt();
            for w in &mut flat[slot.weights..slot.bias] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Self::from_parts(config, flat)
    }

    /// All weights and biases zero: every masked position predicts the uniform distribution.
    pub fn zeros(config: DenoiserConfig) -> Result<Self> {
        let n = config.parameter_count();
        Self::from_parts(config, vec![0.0; n])
    }

    /// Zero weights with the given output logits as biases, a constant predictor.
    pub fn with_output_logits(config: DenoiserConfig, logits: &[Vec<f64>]) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if logits.len() != p.config.len() {
            return Err(Error::Shape("one logit vector per position required".into()));
        }
        let out = *layout(&p.config).last().expect("at least one layer");
        for (l, row) in logits.iter().enumerate() {
            if row.len() != p.config.vocab_sizes[l] {
                return Err(Error::Shape(format!("position {l}: wrong logit count")));
            }
            let base = out.bias + p.head_offsets[l];
            p.flat[base..base + row.len()].copy_from_slice(row);
        }
        Ok(p)
    }

    pub fn from_flat(config: DenoiserConfig, flat: Vec<f64>) -> Result<Self> {
        Self::from_parts(config, flat)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn vocab_sizes(&self) -> &Arc<[usize]> {
        &self.vocab
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn parameter_count(&self) -> usize {
        self.flat.len()
    }

    /// Applies `f` to the parameter vector in place and re-checks finiteness.
    pub fn update<F: FnOnce(&mut [f64])>(&mut self, f: F) -> Result<()> {
        f(&mut self.flat);
        if self.flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter after update".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &SequenceState, t: f64) -> Result<()> {
        if x.vocab_sizes().as_ref() != self.vocab.as_ref() {
            return Err(Error::Shape("sequence vocabularies do not match the network".into()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("t = {t} is outside [0, 1]")));
        }
        Ok(())
    }

    pub fn forward(&self, x: &SequenceState, t: f64) -> Result<CategoricalOutput> {
        self.forward_traced(x, t).map(|(out, _)| out)
    }

    pub fn forward_traced(&self, x: &SequenceState, t: f64) -> Result<(CategoricalOutput, Trace)> {
        self.check_input(x, t)?;
        let layers = layout(&self.config);
        let act = self.config.activation;

        let active_inputs: Vec<usize> = x
            .tokens()
            .iter()
            .enumerate()
            .map(|(l, tok)| match tok {
                Token::Value(k) => self.input_offsets[l] + k,
                Token::Mask => self.input_offsets[l] + self.config.vocab_sizes[l],
            })
            .collect();
        let time_feature = self.config.time_conditioned.then_some(t);
        let masked: Vec<bool> = x.tokens().iter().map(|tok| tok.is_mask()).collect();

        let mut pre = Vec::with_capacity(layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers.len() - 1);

        // first layer: sparse one-hot input
        let first = layers[0];
        let mut z: Vec<f64> = self.flat[first.bias..first.bias + first.fan_out].to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &self.flat[first.weights + o * first.fan_in..first.weights + (o + 1) * first.fan_in];
            for &i in &active_inputs {
                *zo += row[i];
            }
            if let Some(tf) = time_feature {
                *zo += row[first.fan_in - 1] * tf;
            }
        }

        for slot in &layers[1..] {
            let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            pre.push(std::mem::take(&mut z));
            let mut next = self.flat[slot.bias..slot.bias + slot.fan_out].to_vec();
            for (o, n) in next.iter_mut().enumerate() {
                let row = &self.flat[slot.weights + o * slot.fan_in..slot.weights + (o + 1) * slot.fan_in];
                *n += row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>();
            }
            post.push(a);
            z = next;
        }
        let logits = z;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }

        let mut probs = Vec::with_capacity(x.len());
        let mut log_probs = Vec::with_capacity(x.len());
        for (l, tok) in x.tokens().iter().enumerate() {
            let v = self.config.vocab_sizes[l];
            match tok {
                Token::Value(k) => {
                    let mut p = vec![0.0; v];
                    let mut lp = vec![f64::NEG_INFINITY; v];
                    p[*k] = 1.0;
                    lp[*k] = 0.0;
                    probs.push(p);
                    log_probs.push(lp);
                }
                Token::Mask => {
                    let head = &logits[self.head_offsets[l]..self.head_offsets[l] + v];
                    let max = head.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + head.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                    let lp: Vec<f64> = head.iter().map(|z| z - lse).collect();
                    probs.push(lp.iter().map(|v| v.exp()).collect());
                    log_probs.push(lp);
                }
            }
        }
        pre.push(logits);

        Ok((CategoricalOutput { probs, log_probs }, Trace { active_inputs, time_feature, pre, post, masked }))
    }

    /// Gradient of `sum_{l,k} upstream[l][k] * log_probs[l][k]` with respect to the parameters.
    pub fn backward(&self, x: &SequenceState, t: f64, upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
        if upstream.len() != x.len() {
            return Err(Error::Shape("one upstream vector per position required".into()));
        }
        let (out, trace) = self.forward_traced(x, t)?;
        let mut d_logits = vec![0.0; self.config.output_dim()];
        for (l, g) in upstream.iter().enumerate() {
            if g.len() != self.config.vocab_sizes[l] {
                return Err(Error::Shape(format!("position {l}: upstream length mismatch")));
            }
            if !trace.masked[l] {
                continue;
            }
            let total: f64 = g.iter().sum();
            let base = self.head_offsets[l];
            for (k, (&gk, &pk)) in g.iter().zip(&out.probs[l]).enumerate() {
                d_logits[base + k] = gk - pk * total;
            }
        }
        let mut grad = vec![0.0; self.flat.len()];
        self.backprop(&trace, &d_logits, 1.0, &mut grad);
        Ok(grad)
    }

    /// Accumulates `scale * d/dtheta sum_i coef_i * log p[pos_i][class_i]` into `grad`.
    /// Targets at carried-over positions are ignored.
    pub fn accumulate_target_grad(
        &self,
        trace: &Trace,
        output: &CategoricalOutput,
        targets: &[(usize, usize, f64)],
        grad: &mut [f64],
    ) {
        let mut d_logits = vec![0.0; self.config.output_dim()];
        let mut any = false;
        for &(l, class, coef) in targets {
            if !trace.masked[l] || coef == 0.0 {
                continue;
            }
            any = true;
            let base = self.head_offsets[l];
            for (k, &pk) in output.probs[l].iter().enumerate() {
                let onehot = if k == class { 1.0 } else { 0.0 };
                d_logits[base + k] += coef * (onehot - pk);
            }
        }
        if any {
            self.backprop(trace, &d_logits, 1.0, grad);
        }
    }

    fn backprop(&self, trace: &Trace, d_logits: &[f64], scale: f64, grad: &mut [f64]) {
        let layers = layout(&self.config);
        let act = self.config.activation;
        let n = layers.len();
        let mut delta: Vec<f64> = d_logits.iter().map(|d| d * scale).collect();

        for idx in (1..n).rev() {
            let slot = layers[idx];
            let input = &trace.post[idx - 1];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grad[slot.bias + o] += d;
                let row = &mut grad[slot.weights + o * slot.fan_in..slot.weights + (o + 1) * slot.fan_in];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            let mut d_input = vec![0.0; slot.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &self.flat[slot.weights + o * slot.fan_in..slot.weights + (o + 1) * slot.fan_in];
                for (di, &w) in d_input.iter_mut().zip(row) {
                    *di += d * w;
                }
            }
            let z = &trace.pre[idx - 1];
            delta =
                d_input.iter().zip(z.iter().zip(input)).map(|(&di, (&zi, &ai))| di * act.derivative(zi, ai)).collect();
        }

        let first = layers[0];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad[first.bias + o] += d;
            let row = first.weights + o * first.fan_in;
            for &i in &trace.active_inputs {
                grad[row + i] += d;
            }
            if let Some(tf) = trace.time_feature {
                grad[row + first.fan_in - 1] += d * tf;
            }
        }
    }
}

/// On-disk checkpoint: network config, flat parameters and schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub params: Vec<f64>,
    pub schedule: MultivariateSchedule,
    pub version: u32,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(params: &DenoiserParams, schedule: &MultivariateSchedule) -> Self {
        Self {
            config: params.config.clone(),
            params: params.flat.clone(),
            schedule: schedule.clone(),
            version: CHECKPOINT_VERSION,
        }
    }

    pub fn into_parts(self) -> Result<(DenoiserParams, MultivariateSchedule)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {}", self.version)));
        }
        if self.schedule.len() != self.config.len() {
            return Err(Error::Shape("schedule length does not match the network".into()));
        }
        Ok((DenoiserParams::from_parts(self.config, self.params)?, self.schedule))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
