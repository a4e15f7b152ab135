//! Reverse-process samplers.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::forward_process::{posterior_unmask_prob, sample_transition_times, SequenceState, Token};
use crate::orders::decoding_order;
use crate::schedule::MultivariateSchedule;
use crate::stats::{sample_categorical, substream};
use crate::tabular::{decode_row, Table, TableSchema};

fn check_model(params: &DenoiserParams, ms: &MultivariateSchedule) -> Result<Arc<[usize]>> {
    if params.config().len() != ms.len() {
        return Err(Error::Shape(format!("network has {} positions, schedule {}", params.config().len(), ms.len())));
    }
    Ok(params.vocab_sizes().clone())
}

/// Draws a sequence by unmasking one position at a time in descending
/// transition-time order; returns the positions in the order they were decoded.
pub fn generate_order_based_traced<R: Rng + ?Sized>(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    rng: &mut R,
) -> Result<(SequenceState, Vec<usize>)> {
    let vocab = check_model(params, ms)?;
    let times = sample_transition_times(ms, rng);
    let decode = decoding_order(&times).generation_order();
    let mut state = SequenceState::all_masked(vocab);
    for &l in &decode {
        let out = params.forward(&state, times.as_slice()[l])?;
        let k = sample_categorical(&out.probs[l], rng);
        state.set(l, Token::Value(k))?;
    }
    Ok((state, decode))
}

/// Order-based generation with exactly one denoiser call per position.
pub fn generate_order_based<R: Rng + ?Sized>(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    rng: &mut R,
) -> Result<SequenceState> {
    generate_order_based_traced(params, ms, rng).map(|(x, _)| x)
}

/// Discrete-time ancestral sampling over `steps` uniform steps from `t = 1` to 0.
pub fn generate_ancestral<R: Rng + ?Sized>(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<SequenceState> {
    let vocab = check_model(params, ms)?;
    if steps == 0 {
        return Err(Error::invalid("steps must be at least 1"));
    }
    let mut state = SequenceState::all_masked(vocab);
    for i in (1..=steps).rev() {
        let t = i as f64 / steps as f64;
        let s = (i - 1) as f64 / steps as f64;
        let mut unmask = Vec::new();
        for (l, sched) in ms.iter().enumerate() {
            if state.is_masked(l) && rng.gen::<f64>() < posterior_unmask_prob(sched, s, t)? {
                unmask.push(l);
            }
        }
        if unmask.is_empty() {
            continue;
        }
        let out = params.forward(&state, t)?;
        for l in unmask {
            let k = sample_categorical(&out.probs[l], rng);
            state.set(l, Token::Value(k))?;
        }
    }
    Ok(state)
}

/// `n_rows` independent order-based draws decoded through `schema`.
pub fn synthesize_table<R: Rng + ?Sized>(
    params: &DenoiserParams,
    ms: &MultivariateSchedule,
    schema: &TableSchema,
    n_rows: usize,
    rng: &mut R,
) -> Result<Table> {
    let vocab = check_model(params, ms)?;
    if schema.vocab_sizes().as_slice() != vocab.as_ref() {
        return Err(Error::Shape("schema vocabularies do not match the network".into()));
    }
    let seed: u64 = rng.gen();
    let rows = (0..n_rows)
        .into_par_iter()
        .map(|i| {
            let x = generate_order_based(params, ms, &mut substream(seed, i as u64))?;
            decode_row(schema, &x)
        })
        .collect::<Result<Vec<_>>>()?;
    Table::new(schema.header(), rows)
}
