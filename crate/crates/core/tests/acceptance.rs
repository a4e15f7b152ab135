//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::sync::Arc;
use std::time::{Duration, Instant};

use ordermask::denoiser::{DenoiserConfig, DenoiserParams};
use ordermask::forward_process::{sample_transition_times, SequenceState};
use ordermask::generator::{generate_ancestral, generate_order_based, synthesize_table};
use ordermask::losses::{discrete_elbo, exact_order_loss, exact_subset_loss, mc_loss, LossEstimate};
use ordermask::metrics::{shape_score, trend_score};
use ordermask::orders::{empirical_order_distribution, exact_order_prob, Order};
use ordermask::schedule::MultivariateSchedule;
use ordermask::schedule_grad::{exact_schedule_grad, rloo_schedule_grad};
use ordermask::stats::{ks_statistic, mean_and_std_error, substream};
use ordermask::tabular::{encode, infer_schema, EncodedDataset, Table, TableSchema};
use ordermask::trainer::{train, TrainConfig, TrainOutcome};
use ordermask::Result;
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

fn random_net(vocab: &[usize], hidden: usize, time_conditioned: bool, seed: u64) -> Result<DenoiserParams> {
    let mut cfg = DenoiserConfig::new(vocab.to_vec(), vec![hidden]);
    cfg.time_conditioned = time_conditioned;
    let mut p = DenoiserParams::init(cfg, &mut substream(seed, 0))?;
    p.update(|w| w.iter_mut().for_each(|v| *v *= 3.0))?;
    Ok(p)
}

fn random_row<R: Rng>(vocab: &[usize], rng: &mut R) -> Result<SequenceState> {
    let values: Vec<usize> = vocab.iter().map(|&v| rng.gen_range(0..v)).collect();
    SequenceState::observed(&values, Arc::from(vocab))
}

fn max_abs(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn criterion_1() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (i, w) in [0.5, 1.0, 2.0, 4.0].into_iter().enumerate() {
        let ms = MultivariateSchedule::from_weights(&[w])?;
        let mut rng = substream(1, i as u64);
        let mut times: Vec<f64> = (0..100_000).map(|_| sample_transition_times(&ms, &mut rng).0[0]).collect();
        // CDF of the transition time is 1 - alpha
        let sched = *ms.position(0);
        worst = worst.max(ks_statistic(&mut times, |t| 1.0 - sched.keep_prob(t)));
    }
    Ok(Outcome::new(worst < 0.01, format!("max KS = {worst:.5} (< 0.01)")))
}

fn criterion_2() -> Result<Outcome> {
    let ms = MultivariateSchedule::from_weights(&[1.0, 2.0])?;
    let ascending = Order::new(vec![0, 1])?;
    let exact_err = (exact_order_prob(&ms, &ascending)? - 2.0 / 3.0).abs();
    let emp_err = (empirical_order_distribution(&ms, 100_000, &mut substream(2, 0))?.get(&ascending) - 2.0 / 3.0).abs();
    let ms3 = MultivariateSchedule::from_weights(&[1.0; 3])?;
    let emp3 = empirical_order_distribution(&ms3, 600_000, &mut substream(2, 1))?;
    let uniform_err = max_abs(Order::all(3).map(|o| emp3.get(&o) - 1.0 / 6.0));
    Ok(Outcome::new(
        exact_err < 1e-6 && emp_err < 0.01 && uniform_err < 0.005,
        format!("exact err {exact_err:.2e} (< 1e-6), empirical err {emp_err:.4} (< 0.01), L=3 uniform err {uniform_err:.4} (< 0.005)"),
    ))
}

fn criterion_3() -> Result<Outcome> {
    let vocab = [3usize, 3, 3];
    let mut rng = substream(3, 0);
    let (mut oracle_gap, mut worst_z): (f64, f64) = (0.0, 0.0);
    for i in 0..5 {
        let net = random_net(&vocab, 16, false, 30 + i)?;
        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..2.0)).collect();
        let ms = MultivariateSchedule::from_weights(&w)?;
        let x0 = random_row(&vocab, &mut rng)?;
        let order = exact_order_loss(&net, &ms, &x0)?;
        let subset = exact_subset_loss(&net, &ms, &x0)?;
        oracle_gap = oracle_gap.max((order.value - subset.value).abs());
        let mc = mc_loss(&net, &ms, &x0, &mut rng, 200_000)?;
        worst_z = worst_z.max(mc.z_score(&subset));
    }
    Ok(Outcome::new(
        oracle_gap < 1e-6 && worst_z < 3.0,
        format!("order vs subset oracle gap {oracle_gap:.2e} (< 1e-6), worst MC z = {worst_z:.2} (< 3)"),
    ))
}

fn criterion_4() -> Result<Outcome> {
    let vocab = [3usize, 2, 4];
    let mut rng = substream(4, 0);
    let mut spread: f64 = 0.0;
    for i in 0..5 {
        let net = random_net(&vocab, 16, false, 40 + i)?;
        let x0 = random_row(&vocab, &mut rng)?;
        let losses = [0.5, 1.0, 2.0, 4.0]
            .into_iter()
            .map(|w| exact_subset_loss(&net, &MultivariateSchedule::from_weights(&[w; 3])?, &x0).map(|l| l.value))
            .collect::<Result<Vec<_>>>()?;
        let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
        spread = spread.max(hi - lo);
    }
    Ok(Outcome::new(spread < 1e-6, format!("max spread across w = {spread:.2e} (< 1e-6)")))
}

fn criterion_5() -> Result<Outcome> {
    let vocab = [2usize, 2];
    let net = random_net(&vocab, 16, true, 50)?;
    let ms = MultivariateSchedule::from_weights(&[1.5, 0.6])?;
    let mut rng = substream(5, 0);
    let x0 = random_row(&vocab, &mut rng)?;
    let de = discrete_elbo(&net, &ms, &x0, 1000, &mut rng, 200_000)?;
    let mc = mc_loss(&net, &ms, &x0, &mut rng, 1_000_000)?;
    let rel = (de.value - mc.value).abs() / mc.value;
    let budget = (de.std_error.powi(2) + mc.std_error.powi(2)).sqrt() / mc.value;
    Ok(Outcome::new(
        rel < 0.01,
        format!(
            "discrete {:.5} vs continuous {:.5}: rel diff {rel:.5} (< 0.01), combined rel std error {budget:.5}",
            de.value, mc.value
        ),
    ))
}

fn criterion_6() -> Result<Outcome> {
    let vocab = [4usize, 4, 4];
    let want = 3.0 * 4f64.ln();
    let uniform = DenoiserParams::zeros(DenoiserConfig::new(vocab.to_vec(), vec![8]))?;
    let ms = MultivariateSchedule::from_weights(&[0.7, 1.0, 3.0])?;
    let mut rng = substream(6, 0);
    let x0 = random_row(&vocab, &mut rng)?;
    let mc = mc_loss(&uniform, &ms, &x0, &mut rng, 100_000)?;
    let mc_z = mc.z_score(&LossEstimate::exact(want));
    let de_err = (discrete_elbo(&uniform, &ms, &x0, 200, &mut rng, 2_000)?.value - want).abs();
    let order_err = (exact_order_loss(&uniform, &ms, &x0)?.value - want).abs();
    let subset_err = (exact_subset_loss(&uniform, &ms, &x0)?.value - want).abs();
    Ok(Outcome::new(
        mc_z < 3.0 && de_err < 1e-6 && order_err < 1e-6 && subset_err < 1e-6,
        format!(
            "L ln V = {want:.6}: mc z {mc_z:.2} (< 3), discrete err {de_err:.1e}, order err {order_err:.1e}, subset err {subset_err:.1e} (< 1e-6)"
        ),
    ))
}

fn denoiser_fd_error(net: &DenoiserParams, seed: u64) -> Result<f64> {
    let vocab = net.vocab_sizes().clone();
    let mut rng = substream(seed, 0);
    let mask: Vec<bool> = (0..vocab.len()).map(|l| l % 2 == 0).collect();
    let x = random_row(&vocab, &mut rng)?.with_mask(&mask);
    let t = 0.37;
    let up: Vec<Vec<f64>> = vocab.iter().map(|&v| (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let objective = |p: &DenoiserParams| -> Result<f64> {
        let out = p.forward(&x, t)?;
        Ok((0..vocab.len())
            .filter(|&l| x.is_masked(l))
            .map(|l| up[l].iter().zip(&out.log_probs[l]).map(|(a, b)| a * b).sum::<f64>())
            .sum())
    };
    let grad = net.backward(&x, t, &up)?;
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
    Ok(worst)
}

fn criterion_7() -> Result<Outcome> {
    let mut net_err: f64 = 0.0;
    for (i, (vocab, tc)) in [(vec![3, 2, 4], false), (vec![2, 5], true)].into_iter().enumerate() {
        net_err = net_err.max(denoiser_fd_error(&random_net(&vocab, 12, tc, 70 + i as u64)?, 71 + i as u64)?);
    }

    let vocab = [3usize, 2, 2];
    let net = random_net(&vocab, 16, false, 72)?;
    let x0 = random_row(&vocab, &mut substream(7, 0))?;
    let rho = [0.3, -0.4, 0.8];
    let eps = 1e-4;
    let exact = exact_schedule_grad(&net, &MultivariateSchedule::from_log_weights(&rho, eps)?, &x0)?.d_log_weights;
    let h = 1e-5;
    let mut sched_err: f64 = 0.0;
    for k in 0..rho.len() {
        let mut up = rho;
        up[k] += h;
        let mut dn = rho;
        dn[k] -= h;
        let lu = exact_subset_loss(&net, &MultivariateSchedule::from_log_weights(&up, eps)?, &x0)?.value;
        let ld = exact_subset_loss(&net, &MultivariateSchedule::from_log_weights(&dn, eps)?, &x0)?.value;
        let fd = (lu - ld) / (2.0 * h);
        sched_err = sched_err.max((fd - exact[k]).abs() / fd.abs().max(exact[k].abs()));
    }
    Ok(Outcome::new(
        net_err < 1e-4 && sched_err < 1e-5,
        format!("denoiser rel err {net_err:.2e} (< 1e-4), schedule rel err {sched_err:.2e} (< 1e-5)"),
    ))
}

fn criterion_8() -> Result<Outcome> {
    let vocab = [2usize, 2];
    let net = random_net(&vocab, 16, false, 80)?;
    let mut rng = substream(8, 0);
    let x0 = random_row(&vocab, &mut rng)?;
    let ms = MultivariateSchedule::from_log_weights(&[0.2, 0.9], 1e-4)?;
    let exact = exact_schedule_grad(&net, &ms, &x0)?.d_log_weights;
    let k = 4;
    let n_t = 20_000 / k;
    let estimates = (0..50)
        .map(|_| rloo_schedule_grad(&net, &ms, std::slice::from_ref(&x0), k, n_t, &mut rng).map(|g| g.d_log_weights))
        .collect::<Result<Vec<_>>>()?;
    let mut worst_z: f64 = 0.0;
    let mut parts = Vec::new();
    for c in 0..2 {
        let comp: Vec<f64> = estimates.iter().map(|g| g[c]).collect();
        let (mean, se) = mean_and_std_error(&comp);
        let z = (mean - exact[c]).abs() / se;
        worst_z = worst_z.max(z);
        parts.push(format!("d{c}: {mean:.5} vs {:.5} (z {z:.2})", exact[c]));
    }
    Ok(Outcome::new(worst_z < 3.0, format!("{} (< 3)", parts.join(", "))))
}

fn copy_column_dataset(seed: u64) -> Result<EncodedDataset> {
    let mut rng = substream(seed, 0);
    let rows = (0..5000)
        .map(|_| {
            let a: usize = rng.gen_range(0..8);
            let b = if rng.gen::<f64>() < 0.05 { (a + rng.gen_range(1..8)) % 8 } else { a };
            vec![format!("a{a}"), format!("b{b}")]
        })
        .collect();
    let table = Table::new(vec!["A".into(), "B".into()], rows)?;
    encode(&table, &infer_schema(&table, 8)?)
}

fn copy_column_config(seed: u64, learn_schedule: bool) -> TrainConfig {
    TrainConfig { epochs: 30, hidden_dims: vec![64], seed, learn_schedule, ..TrainConfig::default() }
}

fn criterion_9() -> Result<Outcome> {
    let data = copy_column_dataset(9)?;
    let mut best = [Vec::new(), Vec::new()];
    let mut prob_b_first_in_time = Vec::new();
    for seed in 0..3 {
        for (slot, learn) in [(0, true), (1, false)] {
            let out = train(&copy_column_config(seed, learn), &data)?;
            best[slot].push(out.best_val_loss().expect("at least one epoch"));
            if learn {
                let w = out.schedule.weights();
                prob_b_first_in_time.push(w[0] / (w[0] + w[1]));
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (learned, linear) = (mean(&best[0]), mean(&best[1]));
    let direction_ok = prob_b_first_in_time.iter().all(|&p| p > 0.8);
    Ok(Outcome::new(
        learned < linear && direction_ok,
        format!(
            "mean best val NLL learned {learned:.5} vs linear {linear:.5}; per-run learned {:?} linear {:?}; P(t_B < t_A) per seed {:?} (> 0.8)",
            best[0].iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            best[1].iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            prob_b_first_in_time.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>(),
        ),
    ))
}

fn binary_model() -> Result<(TrainOutcome, TableSchema)> {
    let mut rng = substream(10, 0);
    let rows = (0..4000)
        .map(|_| {
            let a = rng.gen::<f64>() < 0.3;
            let b = a ^ (rng.gen::<f64>() < 0.2);
            vec![if a { "yes" } else { "no" }.to_string(), if b { "on" } else { "off" }.to_string()]
        })
        .collect();
    let table = Table::new(vec!["a".into(), "b".into()], rows)?;
    let schema = infer_schema(&table, 2)?;
    let data = encode(&table, &schema)?;
    let cfg = TrainConfig { epochs: 10, hidden_dims: vec![32], seed: 10, ..TrainConfig::default() };
    Ok((train(&cfg, &data)?, schema))
}

fn criterion_10(model: &TrainOutcome) -> Result<Outcome> {
    let (net, ms) = (&model.params, &model.schedule);
    let n = 100_000;
    let mut hist = [[0.0f64; 4]; 2];
    let (mut r1, mut r2) = (substream(10, 1), substream(10, 2));
    for _ in 0..n {
        let a = generate_order_based(net, ms, &mut r1)?.values().expect("complete row");
        let b = generate_ancestral(net, ms, 256, &mut r2)?.values().expect("complete row");
        hist[0][a[0] * 2 + a[1]] += 1.0 / n as f64;
        hist[1][b[0] * 2 + b[1]] += 1.0 / n as f64;
    }
    let tv = 0.5 * hist[0].iter().zip(&hist[1]).map(|(a, b)| (a - b).abs()).sum::<f64>();
    Ok(Outcome::new(tv < 0.02, format!("TV = {tv:.4} (< 0.02)")))
}

fn criterion_11(model: &TrainOutcome, schema: &TableSchema) -> Result<Outcome> {
    let (net, ms) = (&model.params, &model.schedule);
    let s1 = synthesize_table(net, ms, schema, 10_000, &mut substream(11, 0))?;
    let s2 = synthesize_table(net, ms, schema, 10_000, &mut substream(11, 1))?;
    let self_shape = shape_score(&s1, &s1, schema)?;
    let self_trend = trend_score(&s1, &s1, schema)?;
    let shape = shape_score(&s1, &s2, schema)?;
    Ok(Outcome::new(
        self_shape == 1.0 && self_trend == 1.0 && shape >= 0.97,
        format!(
            "identical: shape {self_shape}, trend {self_trend} (= 1); independent samples shape {shape:.4} (>= 0.97)"
        ),
    ))
}

type Criterion<'a> = (&'a str, Option<Duration>, Box<dyn Fn() -> Result<Outcome> + 'a>);

fn main() {
    // criteria 10 and 11 share one trained model
    let model = std::sync::OnceLock::new();
    let model_ref = || -> Result<&(TrainOutcome, TableSchema)> {
        if model.get().is_none() {
            let _ = model.set(binary_model()?);
        }
        Ok(model.get().expect("set above"))
    };
    let mins = |m: u64| Some(Duration::from_secs(60 * m));
    let criteria: Vec<Criterion> = vec![
        ("1 transition-time law", Some(Duration::from_secs(5)), Box::new(criterion_1)),
        ("2 order distribution", Some(Duration::from_secs(30)), Box::new(criterion_2)),
        ("3 order/subset/MC loss equivalence", mins(2), Box::new(criterion_3)),
        ("4 univariate schedule invariance", None, Box::new(criterion_4)),
        ("5 discrete vs continuous loss", None, Box::new(criterion_5)),
        ("6 uniform predictor value", None, Box::new(criterion_6)),
        ("7 gradient correctness", None, Box::new(criterion_7)),
        ("8 RLOO unbiasedness", mins(2), Box::new(criterion_8)),
        ("9 order discovery end-to-end", mins(10), Box::new(criterion_9)),
        ("10 sampler agreement", None, Box::new(|| criterion_10(&model_ref()?.0))),
        ("11 metrics sanity", None, Box::new(|| model_ref().and_then(|(m, s)| criterion_11(m, s)))),
    ];

    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, limit, run) in &criteria {
        if !only.is_empty() && !only.iter().any(|o| name.split(' ').next() == Some(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let (mut passed, mut detail) = match result {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if let Some(limit) = limit {
            if elapsed > *limit {
                passed = false;
                detail.push_str(&format!("; runtime over limit of {}s", limit.as_secs()));
            }
        }
        if !passed {
            failures += 1;
        }
        println!("{} criterion {name}: {detail} [{:.1}s]", if passed { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
    }
    println!("acceptance: {} of {} criteria failed", failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
