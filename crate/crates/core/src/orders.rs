//! Decoding orders induced by a multivariate schedule.
//!
//! An [`Order`] lists positions by ascending transition time `t*`. In the forward
//! process the first entry is masked first; generation runs in reverse, so the
//! last entry is decoded first (see [`Order::generation_order`]).

use std::collections::BTreeMap;

use itertools::Itertools;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_process::{sample_transition_times, TransitionTimes};
use crate::quadrature::{adaptive_simpson, ORDER_TOLERANCE};
use crate::schedule::{MultivariateSchedule, ScheduleParams};

/// Largest `L` accepted by [`exact_order_prob`].
pub const MAX_EXACT_ORDER_LEN: usize = 6;

/// A permutation of positions sorted by ascending transition time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Order {
    perm: Vec<usize>,
}

impl Order {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::invalid(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(Self { perm })
    }

    pub fn identity(len: usize) -> Self {
        Self { perm: (0..len).collect() }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Positions in the order the reverse process unmasks them.
    pub fn generation_order(&self) -> Vec<usize> {
        self.perm.iter().rev().copied().collect()
    }

    /// All `len!` orders in lexicographic order.
    pub fn all(len: usize) -> impl Iterator<Item = Order> {
        (0..len).permutations(len).map(|perm| Order { perm })
    }
}

/// Sorts positions by ascending time; equal times break by position index.
pub fn decoding_order(times: &TransitionTimes) -> Order {
    let t = times.as_slice();
    let mut perm: Vec<usize> = (0..t.len()).collect();
    perm.sort_by(|&a, &b| t[a].total_cmp(&t[b]).then(a.cmp(&b)));
    Order { perm }
}

/// Samples an order by drawing transition times through the inverse schedule.
pub fn sample_order<R: Rng + ?Sized>(ms: &MultivariateSchedule, rng: &mut R) -> Order {
    decoding_order(&sample_transition_times(ms, rng))
}

/// `P(t_{perm[0]} < ... < t_{perm[k-1]} < s)` by nested quadrature.
///
/// With `F_l(t) = 1 - alpha_l(t)` the recursion is
/// `G_k(s) = integral_0^{F_k(s)} G_{k-1}(F_k^{-1}(u)) du`, `G_1 = F_1`.
/// Integrating in `u` instead of `t` removes the density singularity at 0.
fn prefix_probability(chain: &[&ScheduleParams], s: f64) -> f64 {
    match chain.split_last() {
        None => 1.0,
        Some((last, [])) => last.mask_prob(s),
        Some((last, rest)) => {
            let upper = last.mask_prob(s);
            adaptive_simpson(|u| prefix_probability(rest, last.inverse_mask_prob(u)), 0.0, upper, ORDER_TOLERANCE)
        }
    }
}

/// Exact probability of `order`, the integral of the product of transition-time
/// densities over the region where the times are sorted as `order` says.
pub fn exact_order_prob(ms: &MultivariateSchedule, order: &Order) -> Result<f64> {
    if order.len() != ms.len() {
        return Err(Error::Shape(format!("order of length {} for {} positions", order.len(), ms.len())));
    }
    if ms.len() > MAX_EXACT_ORDER_LEN {
        return Err(Error::Budget { what: "exact_order_prob", limit: MAX_EXACT_ORDER_LEN, got: ms.len() });
    }
    let chain: Vec<&ScheduleParams> = order.perm.iter().map(|&l| ms.position(l)).collect();
    Ok(prefix_probability(&chain, 1.0).clamp(0.0, 1.0))
}

/// Probability table over orders.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OrderDistribution {
    probs: BTreeMap<Order, f64>,
}

#[derive(Serialize)]
struct OrderProb<'a> {
    perm: &'a [usize],
    prob: f64,
}

impl Serialize for OrderDistribution {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(self.probs.iter().map(|(o, &p)| OrderProb { perm: o.perm(), prob: p }))
    }
}

impl OrderDistribution {
    pub fn get(&self, order: &Order) -> f64 {
        self.probs.get(order).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Order, f64)> {
        self.probs.iter().map(|(o, &p)| (o, p))
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probs.values().sum()
    }

    /// Total-variation distance over the union of both supports.
    pub fn total_variation(&self, other: &OrderDistribution) -> f64 {
        let keys: std::collections::BTreeSet<&Order> = self.probs.keys().chain(other.probs.keys()).collect();
        0.5 * keys.into_iter().map(|o| (self.get(o) - other.get(o)).abs()).sum::<f64>()
    }
}

/// The full table of [`exact_order_prob`] over all `L!` orders.
pub fn exact_order_distribution(ms: &MultivariateSchedule) -> Result<OrderDistribution> {
    let probs = Order::all(ms.len()).map(|o| exact_order_prob(ms, &o).map(|p| (o, p))).collect::<Result<_>>()?;
    Ok(OrderDistribution { probs })
}

/// Frequency table of `n` draws of [`sample_order`].
pub fn empirical_order_distribution<R: Rng + ?Sized>(
    ms: &MultivariateSchedule,
    n: usize,
    rng: &mut R,
) -> Result<OrderDistribution> {
    if n == 0 {
        return Err(Error::invalid("need at least one draw"));
    }
    let mut counts: BTreeMap<Order, usize> = BTreeMap::new();
    for _ in 0..n {
        *counts.entry(sample_order(ms, rng)).or_default() += 1;
    }
    let probs = counts.into_iter().map(|(o, c)| (o, c as f64 / n as f64)).collect();
    Ok(OrderDistribution { probs })
}

/// Probability that position `l` has the largest transition time (is decoded first).
pub fn prob_decoded_first(ms: &MultivariateSchedule, l: usize) -> Result<f64> {
    let mut total = 0.0;
    for o in Order::all(ms.len()).filter(|o| o.perm.last() == Some(&l)) {
        total += exact_order_prob(ms, &o)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::substream;
    use proptest::prelude::*;

    /// Independent closed form: integrating the power densities level by level
    /// gives `prod_i w_{perm[i]} / (w_{perm[0]} + ... + w_{perm[i]})`.
    fn closed_form(weights: &[f64], perm: &[usize]) -> f64 {
        let mut acc = 0.0;
        let mut p = 1.0;
        for &l in perm {
            acc += weights[l];
            p *= weights[l] / acc;
        }
        p
    }

    #[test]
    fn decoding_order_examples() {
        let o = decoding_order(&TransitionTimes(vec![0.9, 0.1]));
        assert_eq!(o.perm(), &[1, 0]);
        assert_eq!(o.generation_order(), vec![0, 1]);
        assert_eq!(decoding_order(&TransitionTimes(vec![0.2, 0.2])).perm(), &[0, 1]);
        assert_eq!(decoding_order(&TransitionTimes(vec![0.3, 0.7, 0.5])).perm(), &[0, 2, 1]);
    }

    #[test]
    fn order_validation() {
        assert!(Order::new(vec![0, 0]).is_err());
        assert!(Order::new(vec![0, 2]).is_err());
        assert!(Order::new(vec![1, 0]).is_ok());
        assert_eq!(Order::all(3).count(), 6);
    }

    #[test]
    fn exact_examples() {
        let one = MultivariateSchedule::from_weights(&[0.7]).unwrap();
        assert!((exact_order_prob(&one, &Order::identity(1)).unwrap() - 1.0).abs() < 1e-12);

        let ms = MultivariateSchedule::from_weights(&[1.0, 2.0]).unwrap();
        let p = exact_order_prob(&ms, &Order::identity(2)).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-6, "{p}");

        let ms = MultivariateSchedule::linear(3).unwrap();
        for o in Order::all(3) {
            assert!((exact_order_prob(&ms, &o).unwrap() - 1.0 / 6.0).abs() < 1e-6);
        }
    }

    #[test]
    fn budget_error() {
        let ms = MultivariateSchedule::linear(7).unwrap();
        assert!(matches!(exact_order_prob(&ms, &Order::identity(7)), Err(Error::Budget { .. })));
        let ms = MultivariateSchedule::linear(3).unwrap();
        assert!(matches!(exact_order_prob(&ms, &Order::identity(2)), Err(Error::Shape(_))));
    }

    #[test]
    fn matches_closed_form_l4() {
        let w = [0.5, 1.7, 0.9, 3.0];
        let ms = MultivariateSchedule::from_weights(&w).unwrap();
        for o in Order::all(4) {
            let q = exact_order_prob(&ms, &o).unwrap();
            let c = closed_form(&w, o.perm());
            assert!((q - c).abs() < 1e-7, "{:?}: {q} vs {c}", o.perm());
        }
    }

    #[test]
    fn degenerate_limit_and_dominance() {
        let ms = MultivariateSchedule::from_weights(&[0.05, 20.0]).unwrap();
        assert!(exact_order_prob(&ms, &Order::identity(2)).unwrap() > 0.99);

        let mut last = 0.0;
        for &w in &[0.5, 1.0, 2.0, 4.0] {
            let ms = MultivariateSchedule::from_weights(&[w, 1.0]).unwrap();
            let p = prob_decoded_first(&ms, 0).unwrap();
            assert!(p >= last - 1e-9);
            last = p;
        }
    }

    #[test]
    fn empirical_examples() {
        let ms = MultivariateSchedule::from_weights(&[1.0, 2.0]).unwrap();
        let emp = empirical_order_distribution(&ms, 100_000, &mut substream(5, 0)).unwrap();
        assert!((emp.get(&Order::identity(2)) - 2.0 / 3.0).abs() < 0.01);
        assert!((emp.get(&Order::new(vec![1, 0]).unwrap()) - 1.0 / 3.0).abs() < 0.01);

        let single = empirical_order_distribution(&ms, 1, &mut substream(5, 1)).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.total(), 1.0);

        assert!(empirical_order_distribution(&ms, 0, &mut substream(5, 2)).is_err());
    }

    #[test]
    fn identical_schedules_two_positions() {
        let ms = MultivariateSchedule::linear(2).unwrap();
        let emp = empirical_order_distribution(&ms, 100_000, &mut substream(6, 0)).unwrap();
        for (_, p) in emp.iter() {
            assert!((p - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn json_table() {
        let ms = MultivariateSchedule::from_weights(&[1.0, 2.0]).unwrap();
        let v = serde_json::to_value(exact_order_distribution(&ms).unwrap()).unwrap();
        assert_eq!(v[0]["perm"], serde_json::json!([0, 1]));
        assert!((v[0]["prob"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 16, .. ProptestConfig::default() })]

        #[test]
        fn normalization(w in prop::collection::vec(0.2f64..5.0, 1..=4)) {
            let ms = MultivariateSchedule::from_weights(&w).unwrap();
            let total = exact_order_distribution(&ms).unwrap().total();
            prop_assert!((total - 1.0).abs() < 1e-6, "total {}", total);
        }
    }
}
