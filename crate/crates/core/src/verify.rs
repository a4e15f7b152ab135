//! Oracle property suites runnable from the command line.
//!
//! Each check compares an estimator against an independent exact value or a
//! statistical law and records the observed deviation next to its threshold.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::forward_process::{sample_transition_times, SequenceState};
use crate::generator::{generate_ancestral, generate_order_based, generate_order_based_traced};
use crate::losses::{discrete_elbo, exact_order_loss, exact_subset_loss, mc_loss, subset_weight};
use crate::orders::{empirical_order_distribution, exact_order_distribution, exact_order_prob, Order};
use crate::schedule::{MultivariateSchedule, ScheduleParams};
use crate::schedule_grad::{exact_schedule_grad, rloo_advantages, rloo_schedule_grad};
use crate::stats::{ks_statistic, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Cdf,
    Orders,
    Elbo,
    Rloo,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["cdf", "orders", "elbo", "rloo", "all"];

    fn expand(self) -> Vec<Suite> {
        match self {
            Suite::All => vec![Suite::Cdf, Suite::Orders, Suite::Elbo, Suite::Rloo],
            s => vec![s],
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cdf" => Ok(Suite::Cdf),
            "orders" => Ok(Suite::Orders),
            "elbo" => Ok(Suite::Elbo),
            "rloo" => Ok(Suite::Rloo),
            "all" => Ok(Suite::All),
            other => Err(Error::invalid(format!("unknown suite {other:?}"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [Suite::Cdf, Suite::Orders, Suite::Elbo, Suite::Rloo, Suite::All].iter().position(|s| s == self);
        f.write_str(Suite::NAMES[i.expect("listed above")])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    /// Observed deviation (or statistic); the check passes when it is below `threshold`.
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), value, threshold, passed: value < threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub passed: bool,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

pub fn run(suite: Suite, seed: u64) -> Result<VerifyReport> {
    let suites = suite
        .expand()
        .into_iter()
        .map(|s| {
            let checks = match s {
                Suite::Cdf => cdf_suite(seed)?,
                Suite::Orders => orders_suite(seed)?,
                Suite::Elbo => elbo_suite(seed)?,
                Suite::Rloo => rloo_suite(seed)?,
                Suite::All => unreachable!("expanded above"),
            };
            Ok(SuiteReport { suite: s.to_string(), passed: checks.iter().all(|c| c.passed), checks })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport { passed: suites.iter().all(|s| s.passed), suites })
}

fn random_net(vocab: &[usize], seed: u64) -> Result<DenoiserParams> {
    let mut p = DenoiserParams::init(DenoiserConfig::new(vocab.to_vec(), vec![16]), &mut substream(seed, 0))?;
    // spread the logits so predictions depend visibly on the masking state
    p.update(|w| w.iter_mut().for_each(|v| *v *= 3.0))?;
    Ok(p)
}

fn random_row<R: Rng>(vocab: &[usize], rng: &mut R) -> Result<SequenceState> {
    let values: Vec<usize> = vocab.iter().map(|&v| rng.gen_range(0..v)).collect();
    SequenceState::observed(&values, Arc::from(vocab))
}

fn cdf_suite(seed: u64) -> Result<Vec<Check>> {
    let n = 100_000;
    let weights = [0.5, 1.0, 2.0, 4.0];
    let mut checks = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let ms = MultivariateSchedule::from_weights(&[w])?;
            let mut rng = substream(seed, i as u64);
            let mut times: Vec<f64> = (0..n).map(|_| sample_transition_times(&ms, &mut rng).0[0]).collect();
            let ks = ks_statistic(&mut times, |t| ms.position(0).mask_prob(t));
            Ok(Check::below(format!("transition_time_ks_w{w}"), ks, 0.01))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = substream(seed, 5);
    let (mut deriv, mut inverse, mut chain, mut violations): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for w in weights {
        let s = ScheduleParams::polynomial(w)?;
        let h = 1e-5;
        for i in 1..=99 {
            let t = i as f64 / 100.0;
            let fd = (s.alpha(t + h)? - s.alpha(t - h)?) / (2.0 * h);
            deriv = deriv.max((s.alpha_prime(t)? - fd).abs());
            if s.alpha(t)? >= s.alpha(t - 0.005)? {
                violations += 1.0;
            }
        }
        for _ in 0..1000 {
            let u: f64 = rng.gen();
            inverse = inverse.max((s.alpha(s.alpha_inverse(u))? - u).abs());
            let mut abc = [rng.gen::<f64>(), rng.gen(), rng.gen()];
            abc.sort_by(f64::total_cmp);
            let [a, b, c] = abc;
            let joint = s.alpha_conditional(a, c)?;
            chain = chain.max((joint - s.alpha_conditional(a, b)? * s.alpha_conditional(b, c)?).abs());
        }
    }
    checks.push(Check::below("alpha_prime_vs_fd", deriv, 1e-6));
    checks.push(Check::below("alpha_inverse_roundtrip", inverse, 1e-10));
    checks.push(Check::below("alpha_conditional_chain", chain, 1e-12));
    checks.push(Check::below("alpha_monotonicity_violations", violations, 0.5));
    Ok(checks)
}

fn orders_suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let ms = MultivariateSchedule::from_weights(&[1.0, 2.0])?;
    let ascending = Order::new(vec![0, 1])?;
    let exact = exact_order_prob(&ms, &ascending)?;
    checks.push(Check::below("order_prob_exact_w1_w2", (exact - 2.0 / 3.0).abs(), 1e-6));
    let emp = empirical_order_distribution(&ms, 100_000, &mut substream(seed, 10))?;
    checks.push(Check::below("order_prob_empirical_w1_w2", (emp.get(&ascending) - 2.0 / 3.0).abs(), 0.01));

    let ms3 = MultivariateSchedule::from_weights(&[1.3; 3])?;
    let emp3 = empirical_order_distribution(&ms3, 600_000, &mut substream(seed, 11))?;
    let worst = Order::all(3).map(|o| (emp3.get(&o) - 1.0 / 6.0).abs()).fold(0.0, f64::max);
    checks.push(Check::below("identical_schedules_uniform_orders", worst, 0.005));

    let ms_mixed = MultivariateSchedule::from_weights(&[0.5, 1.5, 4.0])?;
    let dist = exact_order_distribution(&ms_mixed)?;
    checks.push(Check::below("exact_order_distribution_normalized", (dist.total() - 1.0).abs(), 1e-6));
    let emp_mixed = empirical_order_distribution(&ms_mixed, 200_000, &mut substream(seed, 12))?;
    checks.push(Check::below("exact_vs_empirical_order_tv", dist.total_variation(&emp_mixed), 0.01));

    let net = random_net(&[2, 2], seed ^ 0xa5)?;
    let ms = MultivariateSchedule::from_weights(&[0.7, 2.0])?;
    let n = 100_000;
    let mut counts = [[0.0f64; 4]; 2];
    let (mut r1, mut r2) = (substream(seed, 13), substream(seed, 14));
    for _ in 0..n {
        let a = generate_order_based(&net, &ms, &mut r1)?.values().expect("generated rows are observed");
        let b = generate_ancestral(&net, &ms, 256, &mut r2)?.values().expect("generated rows are observed");
        counts[0][a[0] * 2 + a[1]] += 1.0 / n as f64;
        counts[1][b[0] * 2 + b[1]] += 1.0 / n as f64;
    }
    let tv = 0.5 * counts[0].iter().zip(&counts[1]).map(|(a, b)| (a - b).abs()).sum::<f64>();
    checks.push(Check::below("ancestral_vs_order_based_tv", tv, 0.02));

    let net = random_net(&[2, 2, 2], seed ^ 0x5a)?;
    let ms = MultivariateSchedule::from_weights(&[0.5, 1.0, 2.0])?;
    let n = 60_000;
    let reference = empirical_order_distribution(&ms, n, &mut substream(seed, 15))?;
    let mut rng = substream(seed, 16);
    let mut counts = std::collections::BTreeMap::new();
    for _ in 0..n {
        let mut decoded = generate_order_based_traced(&net, &ms, &mut rng)?.1;
        decoded.reverse();
        *counts.entry(Order::new(decoded)?).or_insert(0.0) += 1.0;
    }
    // two-sample chi-squared with 5 degrees of freedom; 20.52 is the p = 0.001 critical value
    let chi2: f64 = Order::all(3)
        .map(|o| {
            let a = reference.get(&o) * n as f64;
            let b = counts.get(&o).copied().unwrap_or(0.0);
            if a + b > 0.0 {
                (a - b).powi(2) / (a + b)
            } else {
                0.0
            }
        })
        .sum();
    checks.push(Check::below("decode_order_chi2", chi2, 20.52));
    Ok(checks)
}

fn elbo_suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let vocab = [3usize, 3, 3];
    let mut rng = substream(seed, 20);
    let mut min_loss = f64::INFINITY;

    for i in 0..3 {
        let net = random_net(&vocab, seed.wrapping_add(100 + i))?;
        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
        let ms = MultivariateSchedule::from_weights(&w)?;
        let x0 = random_row(&vocab, &mut rng)?;
        let order = exact_order_loss(&net, &ms, &x0)?;
        let subset = exact_subset_loss(&net, &ms, &x0)?;
        checks.push(Check::below(format!("order_vs_subset_oracle_{i}"), (order.value - subset.value).abs(), 1e-6));
        min_loss = min_loss.min(order.value).min(subset.value);
        let mc = mc_loss(&net, &ms, &x0, &mut rng, 200_000)?;
        checks.push(Check::below(format!("mc_vs_oracle_z_{i}"), mc.z_score(&subset), 3.0));

        let same = [0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&w| exact_subset_loss(&net, &MultivariateSchedule::from_weights(&[w; 3])?, &x0).map(|l| l.value))
            .collect::<Result<Vec<_>>>()?;
        let spread =
            same.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - same.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        checks.push(Check::below(format!("univariate_invariance_{i}"), spread, 1e-6));
    }

    let ms = MultivariateSchedule::from_weights(&[0.6, 1.8, 1.1])?;
    let worst = (0..3)
        .map(|l| {
            let total: f64 = (1u64..8).filter(|p| p >> l & 1 == 1).map(|p| subset_weight(&ms, p, l)).sum();
            (total - 1.0).abs()
        })
        .fold(0.0, f64::max);
    checks.push(Check::below("subset_weights_marginalize", worst, 1e-6));

    let uniform = DenoiserParams::zeros(DenoiserConfig::new(vocab.to_vec(), vec![4]))?;
    let x0 = random_row(&vocab, &mut rng)?;
    let want = 3.0 * 3f64.ln();
    checks.push(Check::below("uniform_order_oracle", (exact_order_loss(&uniform, &ms, &x0)?.value - want).abs(), 1e-6));
    checks.push(Check::below(
        "uniform_subset_oracle",
        (exact_subset_loss(&uniform, &ms, &x0)?.value - want).abs(),
        1e-6,
    ));
    let mc = mc_loss(&uniform, &ms, &x0, &mut rng, 100_000)?;
    checks.push(Check::below("uniform_mc_z", (mc.value - want).abs() / mc.std_error, 3.0));
    let de = discrete_elbo(&uniform, &ms, &x0, 1000, &mut rng, 1000)?;
    checks.push(Check::below("uniform_discrete", (de.value - want).abs(), 1e-6));

    let vocab2 = [2usize, 2];
    let net = random_net(&vocab2, seed.wrapping_add(200))?;
    let ms2 = MultivariateSchedule::from_weights(&[1.5, 3.0])?;
    let x0 = random_row(&vocab2, &mut rng)?;
    let de = discrete_elbo(&net, &ms2, &x0, 1000, &mut rng, 200_000)?;
    let mc = mc_loss(&net, &ms2, &x0, &mut rng, 1_000_000)?;
    checks.push(Check::below("discrete_vs_continuous_rel", (de.value - mc.value).abs() / mc.value, 0.01));

    // common random numbers across T so only the discretization differs
    let net = random_net(&vocab, seed.wrapping_add(210))?;
    let ms3 = MultivariateSchedule::from_weights(&[0.8, 1.6, 1.2])?;
    let x0 = random_row(&vocab, &mut rng)?;
    let exact = exact_subset_loss(&net, &ms3, &x0)?;
    let gaps = [10, 100, 1000]
        .iter()
        .map(|&steps| {
            Ok((discrete_elbo(&net, &ms3, &x0, steps, &mut substream(seed, 21), 100_000)?.value - exact.value).abs())
        })
        .collect::<Result<Vec<f64>>>()?;
    let increases = gaps.windows(2).filter(|g| g[1] >= g[0]).count();
    checks.push(Check::below("discrete_gap_decreases_in_steps", increases as f64, 0.5));
    checks.push(Check::below("negative_loss_values", min_loss.min(0.0).abs(), 1e-12));

    checks.push(denoiser_gradient_check(seed)?);
    Ok(checks)
}

fn denoiser_gradient_check(seed: u64) -> Result<Check> {
    let net = random_net(&[3, 2, 4], seed.wrapping_add(300))?;
    let mut rng = substream(seed, 30);
    let x = random_row(&[3, 2, 4], &mut rng)?.with_mask(&[true, false, true]);
    let up: Vec<Vec<f64>> = [3, 2, 4].iter().map(|&v| (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let objective = |p: &DenoiserParams| -> Result<f64> {
        let out = p.forward(&x, 0.5)?;
        Ok((0..3)
            .filter(|&l| x.is_masked(l))
            .map(|l| up[l].iter().zip(&out.log_probs[l]).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    };
    let grad = net.backward(&x, 0.5, &up)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..net.parameter_count() {
        let shifted = |d: f64| {
            let mut flat = net.flat().to_vec();
            flat[i] += d;
            DenoiserParams::from_flat(net.config().clone(), flat)
        };
        let fd = (objective(&shifted(h)?)? - objective(&shifted(-h)?)?) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3));
    }
    Ok(Check::below("denoiser_backprop_vs_fd", worst, 1e-4))
}

fn rloo_suite(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let vocab = [2usize, 2];
    let net = random_net(&vocab, seed.wrapping_add(400))?;
    let mut rng = substream(seed, 40);
    let x0 = random_row(&vocab, &mut rng)?;
    let rho = [0.2, 0.7];
    let ms = MultivariateSchedule::from_log_weights(&rho, 1e-4)?;
    let exact = exact_schedule_grad(&net, &ms, &x0)?.d_log_weights;

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..2 {
        let mut up = rho;
        up[k] += h;
        let mut dn = rho;
        dn[k] -= h;
        let lu = exact_subset_loss(&net, &MultivariateSchedule::from_log_weights(&up, 1e-4)?, &x0)?.value;
        let ld = exact_subset_loss(&net, &MultivariateSchedule::from_log_weights(&dn, 1e-4)?, &x0)?.value;
        worst = worst.max(((lu - ld) / (2.0 * h) - exact[k]).abs() / exact[k].abs());
    }
    checks.push(Check::below("exact_schedule_grad_vs_fd", worst, 1e-5));

    let est = rloo_schedule_grad(&net, &ms, std::slice::from_ref(&x0), 4, 25_000, &mut rng)?;
    for (k, want) in exact.iter().enumerate() {
        let z = (est.d_log_weights[k] - want).abs() / est.diagnostics.std_errors[k];
        checks.push(Check::below(format!("rloo_vs_exact_z_{k}"), z, 3.0));
    }

    let uniform = DenoiserParams::zeros(DenoiserConfig::new(vocab.to_vec(), vec![4]))?;
    let est = rloo_schedule_grad(&uniform, &ms, std::slice::from_ref(&x0), 4, 25_000, &mut rng)?;
    for k in 0..2 {
        let z = est.d_log_weights[k].abs() / est.diagnostics.std_errors[k];
        checks.push(Check::below(format!("rloo_uniform_zero_z_{k}"), z, 3.0));
    }
    let g = exact_schedule_grad(&uniform, &ms, &x0)?;
    let worst = g.d_log_weights.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    checks.push(Check::below("exact_grad_uniform_zero", worst, 1e-9));

    // variance of a single group estimate, summed over components
    let group_var = |k: usize, stream: u64| -> Result<f64> {
        let n_t = 20_000;
        let est = rloo_schedule_grad(&net, &ms, std::slice::from_ref(&x0), k, n_t, &mut substream(seed, stream))?;
        Ok(est.diagnostics.std_errors.iter().map(|se| se * se * n_t as f64).sum())
    };
    checks.push(Check::below("rloo_variance_ratio_k8_over_k2", group_var(8, 41)? / group_var(2, 42)?, 1.0));

    let rewards: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..5.0)).collect();
    let shifted: Vec<f64> = rewards.iter().map(|r| r + 17.25).collect();
    let diff =
        rloo_advantages(&rewards).iter().zip(rloo_advantages(&shifted)).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    checks.push(Check::below("rloo_baseline_shift_invariance", diff, 1e-12));
    Ok(checks)
}
