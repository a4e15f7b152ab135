//! Polynomial masking schedules `alpha(t) = 1 - t^w`.
//!
//! `alpha(t)` is the probability that a token is still unmasked at time `t`.
//! A [`MultivariateSchedule`] holds one schedule per sequence position; learnable
//! weights live in log space (`w = exp(rho)`) so unconstrained optimizer steps
//! keep them positive.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default lower time limit for loss integration (also the JSON `eps` field).
pub const DEFAULT_EPS: f64 = 1e-4;

/// Floor applied to `1 - alpha` wherever it appears in a denominator.
pub const DENOM_FLOOR: f64 = 1e-6;

/// Allowed range of schedule weights after an optimizer step.
pub const MIN_WEIGHT: f64 = 0.05;
pub const MAX_WEIGHT: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Polynomial,
}

/// A single position's schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    pub kind: ScheduleKind,
    weight: f64,
    eps: f64,
}

fn check_time(t: f64, name: &str) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::domain(format!("{name} = {t} is outside [0, 1]")))
    }
}

impl ScheduleParams {
    pub fn new(weight: f64, eps: f64) -> Result<Self> {
        if !(weight.is_finite() && weight > 0.0) {
            return Err(Error::Config(format!("schedule weight must be positive, got {weight}")));
        }
        if !(eps > 0.0 && eps < 0.5) {
            return Err(Error::Config(format!("schedule eps must lie in (0, 0.5), got {eps}")));
        }
        Ok(Self { kind: ScheduleKind::Polynomial, weight, eps })
    }

    pub fn polynomial(weight: f64) -> Result<Self> {
        Self::new(weight, DEFAULT_EPS)
    }

    /// The linear schedule `alpha(t) = 1 - t`.
    pub fn linear() -> Self {
        Self { kind: ScheduleKind::Polynomial, weight: 1.0, eps: DEFAULT_EPS }
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn log_weight(&self) -> f64 {
        self.weight.ln()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_time(t, "t")?;
        Ok(self.keep_prob(t))
    }

    pub fn alpha_prime(&self, t: f64) -> Result<f64> {
        check_time(t, "t")?;
        if t == 0.0 && self.weight < 1.0 {
            return Err(Error::Singularity(format!("alpha'(0) diverges for weight {} < 1", self.weight)));
        }
        Ok(-self.density(t))
    }

    /// Time at which `alpha` equals `u`: `(1 - u)^(1/w)`. `u` is clamped to `[0, 1]`.
    pub fn alpha_inverse(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        (1.0 - u).powf(1.0 / self.weight)
    }

    /// `alpha(t) / alpha(s)`, the probability of staying unmasked from `s` to `t`.
    pub fn alpha_conditional(&self, s_time: f64, t_time: f64) -> Result<f64> {
        check_time(s_time, "s")?;
        check_time(t_time, "t")?;
        if s_time > t_time {
            return Err(Error::domain(format!("need s <= t, got s = {s_time}, t = {t_time}")));
        }
        if s_time == t_time {
            return Ok(1.0);
        }
        let alpha_s = self.keep_prob(s_time);
        if alpha_s == 0.0 {
            return Err(Error::Singularity(format!("alpha({s_time}) = 0")));
        }
        Ok(self.keep_prob(t_time) / alpha_s)
    }

    // Unchecked kernels below assume `t` in [0, 1].

    /// `1 - alpha(t) = t^w`, also the CDF of the transition time.
    #[inline]
    pub fn mask_prob(&self, t: f64) -> f64 {
        t.powf(self.weight)
    }

    /// `alpha(t) = 1 - t^w`.
    #[inline]
    pub fn keep_prob(&self, t: f64) -> f64 {
        1.0 - self.mask_prob(t)
    }

    /// `-alpha'(t) = w t^(w-1)`, the transition-time density.
    #[inline]
    pub fn density(&self, t: f64) -> f64 {
        self.weight * t.powf(self.weight - 1.0)
    }

    /// Inverse of [`mask_prob`](Self::mask_prob): `u^(1/w)`.
    #[inline]
    pub fn inverse_mask_prob(&self, u: f64) -> f64 {
        u.powf(1.0 / self.weight)
    }

    /// Per-position loss weight `-alpha'(t) / (1 - alpha(t))` with the denominator floored.
    #[inline]
    pub fn loss_weight(&self, t: f64) -> f64 {
        self.density(t) / self.mask_prob(t).max(DENOM_FLOOR)
    }

    /// d/d(log w) of [`loss_weight`](Self::loss_weight).
    pub fn d_loss_weight(&self, t: f64) -> f64 {
        let w = self.weight;
        let ln_t = t.ln();
        let dens = self.density(t);
        let d_dens = dens * (1.0 + w * ln_t);
        let mask = self.mask_prob(t);
        if mask > DENOM_FLOOR {
            let d_mask = w * ln_t * mask;
            (d_dens * mask - dens * d_mask) / (mask * mask)
        } else {
            d_dens / DENOM_FLOOR
        }
    }

    /// d/d(log w) of [`mask_prob`](Self::mask_prob): `w ln(t) t^w`.
    #[inline]
    pub fn d_mask_prob(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        self.weight * t.ln() * self.mask_prob(t)
    }
}

/// Clamps a weight into `[MIN_WEIGHT, MAX_WEIGHT]`.
pub fn clamp_weight(w: f64) -> f64 {
    w.clamp(MIN_WEIGHT, MAX_WEIGHT)
}

/// One schedule per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleFile", into = "ScheduleFile")]
pub struct MultivariateSchedule {
    per_position: Vec<ScheduleParams>,
}

/// On-disk form: `{"kind":"polynomial","log_weights":[...],"eps":1e-4}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScheduleFile {
    kind: ScheduleKind,
    log_weights: Vec<f64>,
    eps: f64,
}

impl TryFrom<ScheduleFile> for MultivariateSchedule {
    type Error = Error;

    fn try_from(file: ScheduleFile) -> Result<Self> {
        MultivariateSchedule::from_log_weights(&file.log_weights, file.eps)
    }
}

impl From<MultivariateSchedule> for ScheduleFile {
    fn from(ms: MultivariateSchedule) -> Self {
        ScheduleFile { kind: ScheduleKind::Polynomial, log_weights: ms.log_weights(), eps: ms.eps() }
    }
}

impl MultivariateSchedule {
    pub fn new(per_position: Vec<ScheduleParams>) -> Result<Self> {
        if per_position.is_empty() {
            return Err(Error::Config("a schedule needs at least one position".into()));
        }
        Ok(Self { per_position })
    }

    /// All positions linear (`w = 1`, `rho = 0`).
    pub fn linear(len: usize) -> Result<Self> {
        Self::new(vec![ScheduleParams::linear(); len])
    }

    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        Self::new(weights.iter().map(|&w| ScheduleParams::polynomial(w)).collect::<Result<_>>()?)
    }

    pub fn from_log_weights(log_weights: &[f64], eps: f64) -> Result<Self> {
        Self::new(log_weights.iter().map(|&rho| ScheduleParams::new(rho.exp(), eps)).collect::<Result<_>>()?)
    }

    pub fn len(&self) -> usize {
        self.per_position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_position.is_empty()
    }

    pub fn position(&self, l: usize) -> &ScheduleParams {
        &self.per_position[l]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ScheduleParams> {
        self.per_position.iter()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.per_position.iter().map(|s| s.weight).collect()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.per_position.iter().map(|s| s.log_weight()).collect()
    }

    /// Lower time limit used when integrating losses.
    pub fn eps(&self) -> f64 {
        self.per_position[0].eps
    }

    /// Replaces the log-weights, clamping each weight into `[MIN_WEIGHT, MAX_WEIGHT]`.
    pub fn set_log_weights_clamped(&mut self, log_weights: &[f64]) -> Result<()> {
        if log_weights.len() != self.len() {
            return Err(Error::Shape(format!("expected {} log-weights, got {}", self.len(), log_weights.len())));
        }
        for (s, &rho) in self.per_position.iter_mut().zip(log_weights) {
            if !rho.is_finite() {
                return Err(Error::Numeric(format!("log-weight {rho}")));
            }
            s.weight = clamp_weight(rho.exp());
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a MultivariateSchedule {
    type Item = &'a ScheduleParams;
    type IntoIter = std::slice::Iter<'a, ScheduleParams>;

    fn into_iter(self) -> Self::IntoIter {
        self.iter()
    }
}
