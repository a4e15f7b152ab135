//! Gradients of the loss with respect to the schedule log-weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::forward_process::SequenceState;
use crate::losses::{check_instance, masked_sample, pattern_log_probs, subset_weight_grad, time_span, MaskedSample};
use crate::schedule::MultivariateSchedule;
use crate::stats::{mean_and_std_error, stratified_times, substream};

pub const DEFAULT_RLOO_K: usize = 4;
pub const MAX_EXACT_GRAD_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradDiagnostics {
    pub n_samples: usize,
    /// Mean reward over all samples, the average leave-one-out baseline.
    pub baseline_value: f64,
    /// Standard error of each component across `(example, time)` groups.
    pub std_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleGradient {
    pub d_log_weights: Vec<f64>,
    pub diagnostics: GradDiagnostics,
}

/// Score `d/d rho log p(mask | t)` of the factorized Bernoulli mask distribution.
pub(crate) fn mask_score(ms: &MultivariateSchedule, t: f64, mask: &[bool]) -> Vec<f64> {
    ms.iter()
        .zip(mask)
        .map(|(s, &m)| {
            let q = s.mask_prob(t);
            let dq = s.d_mask_prob(t);
            if m {
                if q > 0.0 {
                    dq / q
                } else {
                    0.0
                }
            } else if q < 1.0 {
                -dq / (1.0 - q)
            } else {
                0.0
            }
        })
        .collect()
}

/// Leave-one-out advantages `r_k - mean_{j != k} r_j`.
///
/// Rewards are shifted by `r_0` before averaging so identical rewards give
/// exactly zero and adding a constant leaves every advantage unchanged.
pub fn rloo_advantages(rewards: &[f64]) -> Vec<f64> {
    let k = rewards.len();
    let base = rewards[0];
    let shifted: Vec<f64> = rewards.iter().map(|r| r - base).collect();
    let total: f64 = shifted.iter().sum();
    shifted.iter().map(|&d| d - (total - d) / (k - 1) as f64).collect()
}

/// One `(example, time)` group of `K` mask samples, each with its own endpoint mask.
pub(crate) struct Group {
    pub samples: Vec<MaskedSample>,
    /// RLOO estimate of the schedule gradient from this group.
    pub schedule_grad: Vec<f64>,
}

pub(crate) fn rloo_group<R: Rng + ?Sized>(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    x0: &SequenceState,
    values: &[usize],
    t: f64,
    k: usize,
    rng: &mut R,
) -> Result<Group> {
    let len = values.len();
    let samples = (0..k).map(|_| masked_sample(params, ms, x0, values, t, rng)).collect::<Result<Vec<_>>>()?;
    let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
    let advantages = rloo_advantages(&rewards);
    let span = time_span(ms);

    let mut grad = vec![0.0; len];
    for (sample, adv) in samples.iter().zip(&advantages) {
        let score = mask_score(ms, t, &sample.at_t.mask);
        let end_score = mask_score(ms, ms.eps(), &sample.endpoint.mask);
        for l in 0..len {
            // pathwise: the weight depends on rho through the schedule
            let pathwise = span * ms.position(l).d_loss_weight(t) * sample.at_t.cross_entropy[l];
            grad[l] += pathwise + adv * (score[l] + end_score[l]);
        }
    }
    grad.iter_mut().for_each(|g| *g /= k as f64);
    Ok(Group { samples, schedule_grad: grad })
}

/// RLOO estimate of the schedule gradient over a batch.
///
/// Every example draws `n_t` stratified times on `[t_min, 1]` and `k` masks per
/// time. Examples use independent substreams seeded from `rng`.
pub fn rloo_schedule_grad<R: Rng + ?Sized>(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    batch: &[SequenceState],
    k: usize,
    n_t: usize,
    rng: &mut R,
) -> Result<ScheduleGradient> {
    if k < 2 {
        return Err(Error::invalid("RLOO needs at least 2 samples per group"));
    }
    if batch.is_empty() || n_t == 0 {
        return Err(Error::invalid("batch and n_t must be nonempty"));
    }
    let seed: u64 = rng.gen();
    let len = ms.len();
    let mut group_grads: Vec<Vec<f64>> = Vec::with_capacity(batch.len() * n_t);
    let mut reward_sum = 0.0;
    for (i, x0) in batch.iter().enumerate() {
        let values = check_instance(params, ms, x0)?;
        let mut stream = substream(seed, i as u64);
        for t in stratified_times(n_t, ms.eps(), 1.0, &mut stream) {
            let group = rloo_group(params, ms, x0, &values, t, k, &mut stream)?;
            reward_sum += group.samples.iter().map(|s| s.reward).sum::<f64>();
            group_grads.push(group.schedule_grad);
        }
    }
    let (d_log_weights, std_errors) =
        (0..len).map(|l| mean_and_std_error(&group_grads.iter().map(|g| g[l]).collect::<Vec<_>>())).unzip();
    let n_samples = group_grads.len() * k;
    Ok(ScheduleGradient {
        d_log_weights,
        diagnostics: GradDiagnostics { n_samples, baseline_value: reward_sum / n_samples as f64, std_errors },
    })
}

/// Exact gradient of the subset-sum loss by differentiating each pattern weight
/// under the integral sign.
pub fn exact_schedule_grad(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    x0: &SequenceState,
) -> Result<ScheduleGradient> {
    let values = check_instance(params, ms, x0)?;
    if params.config().time_conditioned {
        return Err(Error::Unsupported("exact_schedule_grad requires a time-independent network".into()));
    }
    let len = values.len();
    if len > MAX_EXACT_GRAD_LEN {
        return Err(Error::Budget { what: "exact_schedule_grad", limit: MAX_EXACT_GRAD_LEN, got: len });
    }
    let table = pattern_log_probs(params, x0, &values)?;
    let mut grad = vec![0.0; len];
    for pattern in 1u64..1 << len {
        for l in (0..len).filter(|&l| pattern >> l & 1 == 1) {
            let ce = -table[pattern as usize][l];
            for (g, dw) in grad.iter_mut().zip(subset_weight_grad(ms, pattern, l)) {
                *g += dw * ce;
            }
        }
    }
    Ok(ScheduleGradient {
        d_log_weights: grad,
        diagnostics: GradDiagnostics { n_samples: 0, baseline_value: 0.0, std_errors: vec![0.0; len] },
    })
}
