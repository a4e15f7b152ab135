//! Joint training of the denoiser and the per-position schedule.
//!
//! Every step draws, for each example in the batch, `n_t_per_example` stratified
//! times and `rloo_k` masks per time. The same samples give the denoiser gradient
//! (backprop through the weighted cross-entropy) and, when the schedule is
//! learned, the RLOO gradient for the log-weights.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Activation, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::forward_process::SequenceState;
use crate::losses::{check_instance, mc_loss_samples, time_span, LossEstimate};
use crate::optim::Adam;
use crate::schedule::MultivariateSchedule;
use crate::schedule_grad::{rloo_group, DEFAULT_RLOO_K};
use crate::stats::{pairwise_sum, stratified_times, substream};
use crate::tabular::{EncodedDataset, DEFAULT_NUMERIC_BINS};

/// Seed of the validation stream, shared by every run so curves are comparable.
pub const VALIDATION_SEED: u64 = 0x0005_eed0_f7a1;
pub const VALIDATION_N_T: usize = 64;

const SPLIT_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const EPOCH_STREAM_BASE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_model: f64,
    pub lr_schedule: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub rloo_k: usize,
    pub seed: u64,
    pub learn_schedule: bool,
    pub time_conditioned: bool,
    pub n_t_per_example: usize,
    pub val_fraction: f64,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub numeric_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr_model: 1e-3,
            lr_schedule: 1e-2,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            rloo_k: DEFAULT_RLOO_K,
            seed: 0,
            learn_schedule: true,
            time_conditioned: false,
            n_t_per_example: 1,
            val_fraction: 0.1,
            hidden_dims: vec![128],
            activation: Activation::Tanh,
            numeric_bins: DEFAULT_NUMERIC_BINS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let checks = [
            (self.epochs >= 1, "epochs must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (positive(self.lr_model) && positive(self.lr_schedule), "learning rates must be positive"),
            (
                (0.0..1.0).contains(&self.adam_betas.0) && (0.0..1.0).contains(&self.adam_betas.1),
                "adam_betas must lie in [0, 1)",
            ),
            (positive(self.adam_eps), "adam_eps must be positive"),
            (self.rloo_k >= 2, "rloo_k must be at least 2"),
            (self.n_t_per_example >= 1, "n_t_per_example must be at least 1"),
            (self.val_fraction > 0.0 && self.val_fraction < 0.5, "val_fraction must lie in (0, 0.5)"),
            (self.numeric_bins >= 1, "numeric_bins must be at least 1"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn denoiser_config(&self, vocab_sizes: &[usize]) -> DenoiserConfig {
        DenoiserConfig {
            vocab_sizes: vocab_sizes.to_vec(),
            hidden_dims: self.hidden_dims.clone(),
            time_conditioned: self.time_conditioned,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_std_error: f64,
    /// Per-position schedule weights at the end of the epoch.
    pub schedule_snapshot: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
    }

    /// One JSON object per line, one line per epoch.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in &self.epochs {
            serde_json::to_writer(&mut w, rec)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters and schedule of the epoch with the lowest validation loss.
    pub params: DenoiserParams,
    pub schedule: MultivariateSchedule,
    pub history: TrainHistory,
    pub best_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.history.epochs[e].val_loss)
    }
}

/// Mean Monte-Carlo loss over `rows`, all rows sharing one set of stratified times.
pub fn evaluate_nll<R: Rng + ?Sized>(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    rows: &[SequenceState],
    rng: &mut R,
    n_t: usize,
) -> Result<LossEstimate> {
    if rows.is_empty() || n_t == 0 {
        return Err(Error::invalid("evaluation needs rows and n_t >= 1"));
    }
    let times = stratified_times(n_t, ms.eps(), 1.0, rng);
    let seed: u64 = rng.gen();
    let per_row = rows
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let values = check_instance(params, ms, x0)?;
            mc_loss_samples(params, ms, x0, &values, &times, &mut substream(seed, i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossEstimate::from_samples(&per_row.concat()))
}

struct ExampleStep {
    model_grad: Vec<f64>,
    schedule_grad: Vec<f64>,
    loss: f64,
}

fn example_step(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    x0: &SequenceState,
    cfg: &TrainConfig,
    seed: u64,
    stream: u64,
) -> Result<ExampleStep> {
    let values = check_instance(params, ms, x0)?;
    let mut rng = substream(seed, stream);
    let (n_t, k) = (cfg.n_t_per_example, cfg.rloo_k);
    let per_sample = 1.0 / (n_t * k) as f64;
    let span = time_span(ms);
    let mut model_grad = vec![0.0; params.parameter_count()];
    let mut schedule_grad = vec![0.0; ms.len()];
    let mut loss = 0.0;
    for t in stratified_times(n_t, ms.eps(), 1.0, &mut rng) {
        let group = rloo_group(params, ms, x0, &values, t, k, &mut rng)?;
        for (g, v) in schedule_grad.iter_mut().zip(&group.schedule_grad) {
            *g += v / n_t as f64;
        }
        for sample in &group.samples {
            loss += sample.reward * per_sample;
            // reward = -span * sum_l w_l(t) log mu_l(x_t) - sum_l log mu_l(x_{t_min})
            for (eval, at_t) in [(&sample.at_t, true), (&sample.endpoint, false)] {
                let Some((out, trace)) = &eval.forward else { continue };
                let weight = |l: usize| if at_t { span * ms.position(l).loss_weight(t) } else { 1.0 };
                let targets: Vec<(usize, usize, f64)> = (0..values.len())
                    .filter(|&l| eval.mask[l])
                    .map(|l| (l, values[l], -weight(l) * per_sample))
                    .collect();
                params.accumulate_target_grad(trace, out, &targets, &mut model_grad);
            }
        }
    }
    Ok(ExampleStep { model_grad, schedule_grad, loss })
}

fn mean_columns(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..rows[0].len()).map(|j| pairwise_sum(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()) / n).collect()
}

type Snapshot = (usize, DenoiserParams, MultivariateSchedule);

fn diverged(
    epoch: usize,
    history: &TrainHistory,
    best: &Option<Snapshot>,
    params: &DenoiserParams,
    schedule: &MultivariateSchedule,
) -> Error {
    let (best_epoch, params, schedule) = match best {
        Some((e, p, s)) => (Some(*e), p.clone(), s.clone()),
        None => (None, params.clone(), schedule.clone()),
    };
    Error::Diverged {
        epoch,
        last_finite: Box::new(TrainOutcome { params, schedule, history: history.clone(), best_epoch }),
    }
}

fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 {
        return (idx.clone(), idx);
    }
    idx.shuffle(&mut substream(seed, SPLIT_STREAM));
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Trains on `dataset`; the run is a pure function of `(config, dataset)`.
///
/// A non-finite loss or parameter aborts with [`Error::Diverged`], carrying the
/// best checkpoint recorded before the failure.
pub fn train(config: &TrainConfig, dataset: &EncodedDataset) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.rows.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let vocab = dataset.schema.vocab_sizes();
    if dataset.rows.iter().any(|r| r.vocab_sizes().as_ref() != vocab.as_slice()) {
        return Err(Error::Shape("rows do not match the dataset schema".into()));
    }
    let (train_idx, val_idx) = split_indices(dataset.rows.len(), config.val_fraction, config.seed);
    let val_rows: Vec<SequenceState> = val_idx.iter().map(|&i| dataset.rows[i].clone()).collect();

    let mut params = DenoiserParams::init(config.denoiser_config(&vocab), &mut substream(config.seed, INIT_STREAM))?;
    let mut schedule = MultivariateSchedule::linear(vocab.len())?;
    let mut model_opt = Adam::new(params.parameter_count(), config.lr_model, config.adam_betas, config.adam_eps);
    let mut schedule_opt = Adam::new(vocab.len(), config.lr_schedule, config.adam_betas, config.adam_eps);

    let mut history = TrainHistory::default();
    let mut best: Option<Snapshot> = None;
    let mut order = train_idx;
    for epoch in 0..config.epochs {
        let mut epoch_rng = substream(config.seed, EPOCH_STREAM_BASE + epoch as u64);
        order.shuffle(&mut epoch_rng);
        let mut losses = Vec::new();
        for batch in order.chunks(config.batch_size) {
            let seed: u64 = epoch_rng.gen();
            let steps = batch
                .par_iter()
                .enumerate()
                .map(|(i, &row)| example_step(&params, &schedule, &dataset.rows[row], config, seed, i as u64))
                .collect::<Result<Vec<_>>>()?;
            let batch_loss = pairwise_sum(&steps.iter().map(|s| s.loss).collect::<Vec<_>>()) / steps.len() as f64;
            let model_grad = mean_columns(&steps.iter().map(|s| s.model_grad.clone()).collect::<Vec<_>>());
            if !batch_loss.is_finite() || model_grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, &history, &best, &params, &schedule));
            }
            let before = params.clone();
            if params.update(|p| model_opt.step(p, &model_grad)).is_err() {
                return Err(diverged(epoch, &history, &best, &before, &schedule));
            }
            if config.learn_schedule {
                let schedule_grad = mean_columns(&steps.iter().map(|s| s.schedule_grad.clone()).collect::<Vec<_>>());
                if schedule_grad.iter().any(|g| !g.is_finite()) {
                    return Err(diverged(epoch, &history, &best, &before, &schedule));
                }
                let mut rho = schedule.log_weights();
                schedule_opt.step(&mut rho, &schedule_grad);
                schedule.set_log_weights_clamped(&rho)?;
            }
            losses.push(batch_loss);
        }

        let val = evaluate_nll(&params, &schedule, &val_rows, &mut substream(VALIDATION_SEED, 0), VALIDATION_N_T)?;
        if !val.value.is_finite() {
            return Err(diverged(epoch, &history, &best, &params, &schedule));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: pairwise_sum(&losses) / losses.len().max(1) as f64,
            val_loss: val.value,
            val_std_error: val.std_error,
            schedule_snapshot: schedule.weights(),
        });
        let improved = best.as_ref().is_none_or(|(e, _, _)| val.value < history.epochs[*e].val_loss);
        if improved {
            best = Some((epoch, params.clone(), schedule.clone()));
        }
    }

    let (best_epoch, params, schedule) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { params, schedule, history, best_epoch: Some(best_epoch) })
}
