//! Negated-ELBO estimators for multivariate masked diffusion.
//!
//! All public losses are in nats and lower is better. `mc_loss` is the trainable
//! Monte-Carlo estimator, `discrete_elbo` the T-step bound, and the two `exact_*`
//! functions are independent closed-form routes for time-independent networks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{CategoricalOutput, DenoiserParams, Trace};
use crate::error::{Error, Result};
use crate::forward_process::{sample_mask, sample_transition_times, SequenceState};
use crate::orders::{exact_order_prob, Order};
use crate::quadrature::{adaptive_simpson, SUBSET_TOLERANCE};
use crate::schedule::{MultivariateSchedule, ScheduleParams};
use crate::stats::{mean_and_std_error, stratified_times};

pub const MAX_ORDER_LOSS_LEN: usize = 5;
pub const MAX_SUBSET_LOSS_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl LossEstimate {
    pub fn exact(value: f64) -> Self {
        Self { value, std_error: 0.0, n_samples: 0 }
    }

    pub fn from_samples(samples: &[f64]) -> Self {
        let (value, std_error) = mean_and_std_error(samples);
        Self { value, std_error, n_samples: samples.len() }
    }

    /// `|self - other| / sqrt(se_a^2 + se_b^2)`; infinite when both are exact and differ.
    pub fn z_score(&self, other: &LossEstimate) -> f64 {
        let diff = (self.value - other.value).abs();
        let se = self.std_error.hypot(other.std_error);
        if se == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / se
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderLogLik {
    pub order: Order,
    pub loglik: f64,
}

/// Validates `(params, ms, x0)` and returns the clean token values.
pub(crate) fn check_instance(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    x0: &SequenceState,
) -> Result<Vec<usize>> {
    if ms.len() != x0.len() || params.config().len() != x0.len() {
        return Err(Error::Shape(format!(
            "network has {} positions, schedule {}, sequence {}",
            params.config().len(),
            ms.len(),
            x0.len()
        )));
    }
    if x0.vocab_sizes().as_ref() != params.vocab_sizes().as_ref() {
        return Err(Error::Shape("sequence vocabularies do not match the network".into()));
    }
    x0.values().ok_or_else(|| Error::invalid("x0 must be fully observed"))
}

fn require_time_independent(params: &DenoiserParams, what: &str) -> Result<()> {
    if params.config().time_conditioned {
        return Err(Error::Unsupported(format!("{what} requires a time-independent network")));
    }
    Ok(())
}

/// Length of the integration range `[t_min, 1]` used by the Monte-Carlo estimators.
pub(crate) fn time_span(ms: &MultivariateSchedule) -> f64 {
    1.0 - ms.eps()
}

/// Denoiser evaluation on `x0` with some positions masked.
pub(crate) struct MaskedEval {
    pub mask: Vec<bool>,
    /// Cross-entropy `-log mu_l[x0_l]` of every masked position, 0 elsewhere.
    pub cross_entropy: Vec<f64>,
    pub forward: Option<(CategoricalOutput, Trace)>,
}

impl MaskedEval {
    fn new(params: &DenoiserParams, x0: &SequenceState, values: &[usize], t: f64, mask: Vec<bool>) -> Result<Self> {
        let mut cross_entropy = vec![0.0; values.len()];
        if !mask.iter().any(|&m| m) {
            return Ok(Self { mask, cross_entropy, forward: None });
        }
        let (out, trace) = params.forward_traced(&x0.with_mask(&mask), t)?;
        for (l, ce) in cross_entropy.iter_mut().enumerate() {
            if mask[l] {
                *ce = -out.log_prob(l, values[l]);
            }
        }
        Ok(Self { mask, cross_entropy, forward: Some((out, trace)) })
    }
}

/// One Monte-Carlo sample: a mask at time `t` for the integral over `[t_min, 1]`
/// and an independent mask at `t_min` for the final reconstruction step, where
/// every still-masked position is predicted at once.
pub(crate) struct MaskedSample {
    /// `(1 - t_min) * sum_l weight_l(t) * CE_l(x_t) + sum_l CE_l(x_{t_min})` over masked `l`.
    pub reward: f64,
    pub at_t: MaskedEval,
    pub endpoint: MaskedEval,
}

pub(crate) fn masked_sample<R: Rng + ?Sized>(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    x0: &SequenceState,
    values: &[usize],
    t: f64,
    rng: &mut R,
) -> Result<MaskedSample> {
    let at_t = MaskedEval::new(params, x0, values, t, sample_mask(ms, t, rng))?;
    let endpoint = MaskedEval::new(params, x0, values, ms.eps(), sample_mask(ms, ms.eps(), rng))?;
    let weighted: f64 = ms.iter().zip(&at_t.cross_entropy).map(|(s, ce)| s.loss_weight(t) * ce).sum();
    let reward = time_span(ms) * weighted + endpoint.cross_entropy.iter().sum::<f64>();
    Ok(MaskedSample { reward, at_t, endpoint })
}

/// Monte-Carlo negated ELBO with per-position schedule weights.
///
/// Times are stratified over `[t_min, 1]`, one mask pattern per time. Each
/// sample also scores the positions still masked at `t_min`, which are decoded
/// jointly in a last step, so the estimate bounds the NLL for every schedule.
pub fn mc_loss<R: Rng + ?Sized>(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    x0: &SequenceState,
    rng: &mut R,
    n_t: usize,
) -> Result<LossEstimate> {
    let values = check_instance(params, ms, x0)?;
    if n_t == 0 {
        return Err(Error::invalid("n_t must be at least 1"));
    }
    let times = stratified_times(n_t, ms.eps(), 1.0, rng);
    mc_loss_at_times(params, ms, x0, &values, &times, rng)
}

pub(crate) fn mc_loss_samples<R: Rng + ?Sized>(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    x0: &SequenceState,
    values: &[usize],
    times: &[f64],
    rng: &mut R,
) -> Result<Vec<f64>> {
    times.iter().map(|&t| masked_sample(params, ms, x0, values, t, rng).map(|s| s.reward)).collect()
}

fn mc_loss_at_times<R: Rng + ?Sized>(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    x0: &SequenceState,
    values: &[usize],
    times: &[f64],
    rng: &mut R,
) -> Result<LossEstimate> {
    Ok(LossEstimate::from_samples(&mc_loss_samples(params, ms, x0, values, times, rng)?))
}

/// Per-step log-ratio terms `log p - log q` of the discrete bound for one position
/// on a uniform grid of `steps` steps, step `i` going from `t = i/T` to `s = (i-1)/T`.
struct StepTable {
    /// Prefix sums of the `x -> x` terms: `keep[i] = sum_{j <= i}`.
    keep: Vec<f64>,
    /// Suffix sums of the `m -> m` terms: `stay[i] = sum_{j >= i}`.
    stay: Vec<f64>,
    /// `x -> m` term at step `i` without the `log mu` factor.
    jump: Vec<f64>,
}

impl StepTable {
    fn new(sched: &ScheduleParams, steps: usize) -> Self {
        let grid = |i: usize| i as f64 / steps as f64;
        let mut keep = vec![0.0; steps + 2];
        let mut stay = vec![0.0; steps + 2];
        let mut jump = vec![0.0; steps + 1];
        for i in 1..=steps {
            let (s, t) = (grid(i - 1), grid(i));
            let (ms_, mt) = (sched.mask_prob(s), sched.mask_prob(t));
            let (log_alpha_s, log_alpha_t) = ((-ms_).ln_1p(), (-mt).ln_1p());
            let log_gap = (mt - ms_).ln();

            // x -> x: p = 1, q = alpha_{t|s}
            keep[i] = keep[i - 1] - (log_alpha_t - log_alpha_s);
            // x -> m: p = (1 - beta) mu, q = 1 - alpha_{t|s}
            let log_p = log_gap - mt.ln();
            let log_q = log_gap - log_alpha_s;
            jump[i] = log_p - log_q;
        }
        for i in (1..=steps).rev() {
            let (s, t) = (grid(i - 1), grid(i));
            // m -> m: p = beta = (1 - alpha_s) / (1 - alpha_t), q = 1
            let term = if s == 0.0 { f64::NEG_INFINITY } else { sched.mask_prob(s).ln() - sched.mask_prob(t).ln() };
            stay[i] = stay[i + 1] + term;
        }
        Self { keep, stay, jump }
    }

    /// Sum of the schedule-only terms for a position whose jump happens at step `at`.
    fn schedule_terms(&self, at: usize) -> f64 {
        self.keep[at - 1] + self.jump[at] + self.stay[at + 1]
    }
}

/// Monte-Carlo over forward trajectories of the `steps`-step negated ELBO.
pub fn discrete_elbo<R: Rng + ?Sized>(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    x0: &SequenceState,
    steps: usize,
    rng: &mut R,
    n_traj: usize,
) -> Result<LossEstimate> {
    let values = check_instance(params, ms, x0)?;
    if steps == 0 || n_traj == 0 {
        return Err(Error::invalid("steps and n_traj must be at least 1"));
    }
    let tables: Vec<StepTable> = ms.iter().map(|s| StepTable::new(s, steps)).collect();
    let mut samples = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let times = sample_transition_times(ms, rng);
        // step at which each position jumps from observed to masked going forward
        let jump_step: Vec<usize> =
            times.as_slice().iter().map(|&t| ((t * steps as f64).ceil() as usize).clamp(1, steps)).collect();
        let mut log_ratio = 0.0;
        for (l, &at) in jump_step.iter().enumerate() {
            let mask: Vec<bool> = jump_step.iter().map(|&j| j <= at).collect();
            let t = at as f64 / steps as f64;
            let out = params.forward(&x0.with_mask(&mask), t)?;
            log_ratio += tables[l].schedule_terms(at) + out.log_prob(l, values[l]);
        }
        samples.push(-log_ratio);
    }
    Ok(LossEstimate::from_samples(&samples))
}

/// `log mu_l[x0_l]` on the state masking exactly the positions in `pattern`,
/// for every pattern (bit `l` set = position `l` masked) and every masked `l`.
pub(crate) fn pattern_log_probs(
    params: &DenoiserParams,
    x0: &SequenceState,
    values: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let len = values.len();
    (0u64..1 << len)
        .map(|pattern| {
            if pattern == 0 {
                return Ok(vec![0.0; len]);
            }
            let out = params.forward(&x0.with_mask_bits(pattern), 0.0)?;
            Ok((0..len).map(|l| if pattern >> l & 1 == 1 { out.log_prob(l, values[l]) } else { 0.0 }).collect())
        })
        .collect()
}

/// Autoregressive log-likelihood of `x0` under every order.
///
/// For an order listing positions by ascending transition time, the rank-`i`
/// position is predicted from the state that masks ranks `0..=i`.
pub fn order_logliks(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    x0: &SequenceState,
) -> Result<Vec<OrderLogLik>> {
    let values = check_instance(params, ms, x0)?;
    require_time_independent(params, "order log-likelihoods")?;
    if values.len() > MAX_ORDER_LOSS_LEN {
        return Err(Error::Budget { what: "order_logliks", limit: MAX_ORDER_LOSS_LEN, got: values.len() });
    }
    let table = pattern_log_probs(params, x0, &values)?;
    Ok(Order::all(values.len())
        .map(|order| {
            let mut pattern = 0u64;
            let mut loglik = 0.0;
            for &l in order.perm() {
                pattern |= 1 << l;
                loglik += table[pattern as usize][l];
            }
            OrderLogLik { order, loglik }
        })
        .collect())
}

/// Exact loss as the order-probability-weighted mixture of order log-likelihoods.
pub fn exact_order_loss(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    x0: &SequenceState,
) -> Result<LossEstimate> {
    let mut total = 0.0;
    for OrderLogLik { order, loglik } in order_logliks(params, ms, x0)? {
        total -= exact_order_prob(ms, &order)? * loglik;
    }
    Ok(LossEstimate::exact(total))
}

/// Integrand factor of one non-target position in the `v` variable, and its
/// derivative with respect to that position's log-weight.
#[derive(Clone, Copy)]
struct Factor {
    /// `2 w_j / w_target`; `t^{w_j} = v^exponent`.
    exponent: f64,
    masked: bool,
}

impl Factor {
    fn value(self, log_v: f64) -> f64 {
        let p = (self.exponent * log_v).exp();
        if self.masked {
            p
        } else {
            1.0 - p
        }
    }

    fn derivative(self, log_v: f64) -> f64 {
        let p = (self.exponent * log_v).exp();
        let d = self.exponent * log_v * p;
        if self.masked {
            d
        } else {
            -d
        }
    }
}

fn pattern_factors(ms: &MultivariateSchedule, pattern: u64, target: usize) -> Vec<(usize, Factor)> {
    let w_target = ms.position(target).weight();
    ms.iter()
        .enumerate()
        .filter(|&(j, _)| j != target)
        .map(|(j, s)| (j, Factor { exponent: 2.0 * s.weight() / w_target, masked: pattern >> j & 1 == 1 }))
        .collect()
}

/// Probability that position `target` transitions at a time where exactly the
/// positions in `pattern` are masked:
/// `integral_0^1 (-alpha'_target(t)) prod_{j != target} [masked: 1 - alpha_j, else alpha_j] dt`.
///
/// Integrated after substituting `t^{w_target} = v^2`, which makes the target
/// density constant and keeps the integrand bounded for every weight ratio.
pub fn subset_weight(ms: &MultivariateSchedule, pattern: u64, target: usize) -> f64 {
    let factors = pattern_factors(ms, pattern, target);
    adaptive_simpson(
        |v| {
            if v <= 0.0 {
                return 0.0;
            }
            let log_v = v.ln();
            2.0 * v * factors.iter().map(|(_, f)| f.value(log_v)).product::<f64>()
        },
        0.0,
        1.0,
        SUBSET_TOLERANCE,
    )
}

/// Gradient of [`subset_weight`] with respect to every log-weight.
pub fn subset_weight_grad(ms: &MultivariateSchedule, pattern: u64, target: usize) -> Vec<f64> {
    let factors = pattern_factors(ms, pattern, target);
    let mut grad = vec![0.0; ms.len()];
    // d/d rho_target of the density w t^{w-1} is density * (1 + w ln t) = density * (1 + 2 ln v)
    grad[target] = adaptive_simpson(
        |v| {
            if v <= 0.0 {
                return 0.0;
            }
            let log_v = v.ln();
            2.0 * v * (1.0 + 2.0 * log_v) * factors.iter().map(|(_, f)| f.value(log_v)).product::<f64>()
        },
        0.0,
        1.0,
        SUBSET_TOLERANCE,
    );
    for (k, (pos, _)) in factors.iter().enumerate() {
        grad[*pos] = adaptive_simpson(
            |v| {
                if v <= 0.0 {
                    return 0.0;
                }
                let log_v = v.ln();
                let rest: f64 = factors
                    .iter()
                    .enumerate()
                    .map(|(i, (_, f))| if i == k { f.derivative(log_v) } else { f.value(log_v) })
                    .product();
                2.0 * v * rest
            },
            0.0,
            1.0,
            SUBSET_TOLERANCE,
        );
    }
    grad
}

/// Exact loss as a sum over mask patterns of pattern weight times cross-entropy.
pub fn exact_subset_loss(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    x0: &SequenceState,
) -> Result<LossEstimate> {
    let values = check_instance(params, ms, x0)?;
    require_time_independent(params, "exact_subset_loss")?;
    let len = values.len();
    if len > MAX_SUBSET_LOSS_LEN {
        return Err(Error::Budget { what: "exact_subset_loss", limit: MAX_SUBSET_LOSS_LEN, got: len });
    }
    let table = pattern_log_probs(params, x0, &values)?;
    let mut total = 0.0;
    for pattern in 1u64..1 << len {
        for l in (0..len).filter(|&l| pattern >> l & 1 == 1) {
            total -= subset_weight(ms, pattern, l) * table[pattern as usize][l];
        }
    }
    Ok(LossEstimate::exact(total))
}
