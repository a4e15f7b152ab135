//! The masking forward process, its closed-form posterior, and transition times.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{MultivariateSchedule, ScheduleParams};

/// A token is either an observed value index or the absorbing mask state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    Value(usize),
    Mask,
}

impl Token {
    pub fn is_mask(self) -> bool {
        matches!(self, Token::Mask)
    }

    pub fn value(self) -> Option<usize> {
        match self {
            Token::Value(k) => Some(k),
            Token::Mask => None,
        }
    }
}

/// A length-`L` sequence over per-position vocabularies, possibly partially masked.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SequenceState {
    tokens: Vec<Token>,
    vocab_sizes: Arc<[usize]>,
}

impl SequenceState {
    pub fn new(tokens: Vec<Token>, vocab_sizes: Arc<[usize]>) -> Result<Self> {
        if tokens.len() != vocab_sizes.len() {
            return Err(Error::Shape(format!("{} tokens for {} vocabularies", tokens.len(), vocab_sizes.len())));
        }
        for (l, (tok, &v)) in tokens.iter().zip(vocab_sizes.iter()).enumerate() {
            if v == 0 {
                return Err(Error::invalid(format!("position {l} has an empty vocabulary")));
            }
            if let Token::Value(k) = tok {
                if *k >= v {
                    return Err(Error::invalid(format!("position {l}: value {k} >= vocab size {v}")));
                }
            }
        }
        Ok(Self { tokens, vocab_sizes })
    }

    /// A fully observed sequence.
    pub fn observed(values: &[usize], vocab_sizes: Arc<[usize]>) -> Result<Self> {
        Self::new(values.iter().map(|&k| Token::Value(k)).collect(), vocab_sizes)
    }

    pub fn all_masked(vocab_sizes: Arc<[usize]>) -> Self {
        Self { tokens: vec![Token::Mask; vocab_sizes.len()], vocab_sizes }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, l: usize) -> Token {
        self.tokens[l]
    }

    pub fn vocab_sizes(&self) -> &Arc<[usize]> {
        &self.vocab_sizes
    }

    pub fn is_masked(&self, l: usize) -> bool {
        self.tokens[l].is_mask()
    }

    pub fn has_mask(&self) -> bool {
        self.tokens.iter().any(|t| t.is_mask())
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_mask()).count()
    }

    /// Observed values, or `None` if any position is masked.
    pub fn values(&self) -> Option<Vec<usize>> {
        self.tokens.iter().map(|t| t.value()).collect()
    }

    /// Copy of `self` with every position where `mask[l]` is true replaced by MASK.
    pub fn with_mask(&self, mask: &[bool]) -> Self {
        let tokens = self.tokens.iter().zip(mask).map(|(&tok, &m)| if m { Token::Mask } else { tok }).collect();
        Self { tokens, vocab_sizes: self.vocab_sizes.clone() }
    }

    /// Copy of `self` with the positions whose bit is set in `pattern` masked.
    pub fn with_mask_bits(&self, pattern: u64) -> Self {
        let mask: Vec<bool> = (0..self.len()).map(|l| pattern >> l & 1 == 1).collect();
        self.with_mask(&mask)
    }

    pub fn set(&mut self, l: usize, token: Token) -> Result<()> {
        if let Token::Value(k) = token {
            if k >= self.vocab_sizes[l] {
                return Err(Error::invalid(format!("position {l}: value {k} out of range")));
            }
        }
        self.tokens[l] = token;
        Ok(())
    }
}

/// Per-position transition times `t*`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTimes(pub Vec<f64>);

impl TransitionTimes {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn check_schedule_len(ms: &MultivariateSchedule, x: &SequenceState) -> Result<()> {
    if ms.len() != x.len() {
        return Err(Error::Shape(format!("schedule has {} positions, sequence has {}", ms.len(), x.len())));
    }
    Ok(())
}

/// Draws the mask pattern of `x_t ~ q(x_t | x_0)`: position `l` is masked with
/// probability `1 - alpha_l(t)`.
pub fn sample_mask<R: Rng + ?Sized>(ms: &MultivariateSchedule, t: f64, rng: &mut R) -> Vec<bool> {
    ms.iter().map(|s| rng.gen::<f64>() < s.mask_prob(t)).collect()
}

/// Samples `x_t` given a fully observed `x0`.
pub fn sample_masked_state<R: Rng + ?Sized>(
    ms: &MultivariateSchedule,
    t: f64,
    x0: &SequenceState,
    rng: &mut R,
) -> Result<SequenceState> {
    check_schedule_len(ms, x0)?;
    if x0.has_mask() {
        return Err(Error::invalid("x0 must be fully observed"));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("t = {t} is outside [0, 1]")));
    }
    Ok(x0.with_mask(&sample_mask(ms, t, rng)))
}

/// One forward transition `q(x_t | x_s)`: observed tokens survive with probability
/// `alpha(t)/alpha(s)`, masked tokens stay masked.
pub fn transition<R: Rng + ?Sized>(
    ms: &MultivariateSchedule,
    s_time: f64,
    t_time: f64,
    xs: &SequenceState,
    rng: &mut R,
) -> Result<SequenceState> {
    check_schedule_len(ms, xs)?;
    let mut mask = Vec::with_capacity(xs.len());
    for (l, sched) in ms.iter().enumerate() {
        let keep = sched.alpha_conditional(s_time, t_time)?;
        // draw for every position so the stream layout does not depend on the state
        let u = rng.gen::<f64>();
        mask.push(xs.is_masked(l) || u >= keep);
    }
    Ok(xs.with_mask(&mask))
}

/// Probability that a token masked at `t_time` is unmasked (to `x0`) at `s_time < t_time`.
pub fn posterior_unmask_prob(s: &ScheduleParams, s_time: f64, t_time: f64) -> Result<f64> {
    if !(0.0 <= s_time && s_time < t_time && t_time <= 1.0) {
        return Err(Error::domain(format!("need 0 <= s < t <= 1, got s = {s_time}, t = {t_time}")));
    }
    let denom = s.mask_prob(t_time);
    if denom == 0.0 {
        return Err(Error::Singularity(format!("1 - alpha({t_time}) = 0")));
    }
    // alpha_s - alpha_t = (1 - alpha_t) - (1 - alpha_s)
    Ok(((denom - s.mask_prob(s_time)) / denom).clamp(0.0, 1.0))
}

/// Draws `t*_l = alpha_l^{-1}(u)`, `u ~ U(0,1)`, independently per position.
///
/// The resulting times have CDF `P(t* <= t) = 1 - alpha_l(t)`.
pub fn sample_transition_times<R: Rng + ?Sized>(ms: &MultivariateSchedule, rng: &mut R) -> TransitionTimes {
    TransitionTimes(ms.iter().map(|s| s.alpha_inverse(rng.gen::<f64>())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_statistic, substream};

    fn vocab(v: &[usize]) -> Arc<[usize]> {
        Arc::from(v)
    }

    #[test]
    fn state_validation() {
        assert!(SequenceState::observed(&[0, 3], vocab(&[2, 3])).is_err());
        assert!(SequenceState::observed(&[0], vocab(&[2, 3])).is_err());
        let x = SequenceState::observed(&[1, 2], vocab(&[2, 3])).unwrap();
        assert!(!x.has_mask());
        let m = x.with_mask_bits(0b10);
        assert_eq!(m.tokens(), &[Token::Value(1), Token::Mask]);
        assert_eq!(m.values(), None);
    }

    #[test]
    fn endpoints_of_masking() {
        let ms = MultivariateSchedule::from_weights(&[0.5, 1.0, 3.0]).unwrap();
        let x0 = SequenceState::observed(&[0, 1, 2], vocab(&[3, 3, 3])).unwrap();
        let mut rng = substream(0, 0);
        for _ in 0..100 {
            assert_eq!(sample_masked_state(&ms, 0.0, &x0, &mut rng).unwrap(), x0);
            let all = sample_masked_state(&ms, 1.0, &x0, &mut rng).unwrap();
            assert_eq!(all.masked_count(), 3);
        }
        let masked = x0.with_mask_bits(1);
        assert!(sample_masked_state(&ms, 0.5, &masked, &mut rng).is_err());
        assert!(sample_masked_state(&ms, 1.5, &x0, &mut rng).is_err());
    }

    #[test]
    fn linear_mask_rate() {
        let ms = MultivariateSchedule::linear(4).unwrap();
        let x0 = SequenceState::observed(&[0, 0, 0, 0], vocab(&[2, 2, 2, 2])).unwrap();
        let mut rng = substream(7, 0);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let x = sample_masked_state(&ms, 0.3, &x0, &mut rng).unwrap();
            for (l, c) in counts.iter_mut().enumerate() {
                *c += x.is_masked(l) as usize;
            }
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.3).abs() < 0.02);
        }
    }

    #[test]
    fn masks_are_absorbing() {
        let ms = MultivariateSchedule::from_weights(&[0.7, 2.0]).unwrap();
        let x0 = SequenceState::observed(&[1, 0], vocab(&[2, 2])).unwrap();
        let mut rng = substream(1, 0);
        for _ in 0..2000 {
            let xt = transition(&ms, 0.0, 0.4, &x0, &mut rng).unwrap();
            let xu = transition(&ms, 0.4, 0.8, &xt, &mut rng).unwrap();
            for l in 0..2 {
                assert!(!xt.is_masked(l) || xu.is_masked(l));
            }
        }
    }

    #[test]
    fn posterior_examples() {
        let lin = ScheduleParams::linear();
        assert!((posterior_unmask_prob(&lin, 0.25, 0.75).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        for &w in &[0.5, 1.0, 2.0] {
            let s = ScheduleParams::polynomial(w).unwrap();
            assert_eq!(posterior_unmask_prob(&s, 0.0, 1.0).unwrap(), 1.0);
            let p = posterior_unmask_prob(&s, 0.5 - 1e-12, 0.5).unwrap();
            assert!(p < 1e-10);
            // normalization with the stay-masked probability
            let (a, b) = (0.2, 0.9);
            let stay = s.mask_prob(a) / s.mask_prob(b);
            assert!((posterior_unmask_prob(&s, a, b).unwrap() + stay - 1.0).abs() < 1e-14);
        }
        assert!(posterior_unmask_prob(&lin, 0.5, 0.5).is_err());
        assert!(posterior_unmask_prob(&lin, 0.6, 0.5).is_err());
    }

    #[test]
    fn transition_time_cdf() {
        for &(w, seed) in &[(1.0, 11u64), (2.0, 12)] {
            let ms = MultivariateSchedule::from_weights(&[w]).unwrap();
            let mut rng = substream(seed, 0);
            let mut xs: Vec<f64> = (0..100_000).map(|_| sample_transition_times(&ms, &mut rng).0[0]).collect();
            if w == 2.0 {
                let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                assert!((mean - 2.0 / 3.0).abs() < 0.01);
            }
            let d = ks_statistic(&mut xs, |t| t.powf(w));
            assert!(d < 0.01, "w={w} ks={d}");
        }
    }
}
