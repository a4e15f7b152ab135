//! `ordermask` command-line entry point.
//!
//! Exit codes: 0 on success, 1 when a command fails or a verification check
//! does not pass, 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ordermask::denoiser::Checkpoint;
use ordermask::metrics::fidelity_report;
use ordermask::orders::{empirical_order_distribution, exact_order_distribution};
use ordermask::schedule::MultivariateSchedule;
use ordermask::stats::substream;
use ordermask::tabular::{encode, infer_schema, Table, TableSchema};
use ordermask::trainer::{train, TrainConfig};
use ordermask::verify::{self, Suite};
use ordermask::{generator, Error};
use serde_json::json;

pub const THREADS_ENV: &str = "ORDERMASK_THREADS";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SCHEMA_FILE: &str = "schema.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CURVE_POINTS: usize = 101;

#[derive(Debug, Parser)]
#[command(name = "ordermask", version, about = "Masked diffusion with learnable per-column schedules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a CSV table.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training configuration (JSON); missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate synthetic rows from a trained checkpoint directory.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a synthetic table against a real one.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        synth: PathBuf,
        #[arg(long)]
        schema: PathBuf,
    },
    /// Run the oracle property suites.
    Verify {
        #[arg(long, default_value = "all", value_parser = clap::builder::PossibleValuesParser::new(Suite::NAMES))]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Distribution over decoding orders induced by a schedule.
    OrderDist {
        /// Schedule JSON (`{"weights": [...]}` or the saved form), or a checkpoint containing one.
        #[arg(long)]
        schedule: PathBuf,
        /// Compute exact probabilities by quadrature.
        #[arg(long)]
        exact: bool,
        /// Number of Monte-Carlo draws for the empirical distribution.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write alpha_t per column on a uniform grid of t as CSV.
    ScheduleCurve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

const DEFAULT_ORDER_SAMPLES: usize = 100_000;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return 2;
    }
    match execute(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or(format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
    // the global pool can only be configured once per process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn print_json(value: &serde_json::Value) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_model(dir: &Path) -> Result<(ordermask::denoiser::DenoiserParams, MultivariateSchedule, TableSchema), Error> {
    let (params, ms) = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?.into_parts()?;
    let schema = TableSchema::load(&dir.join(SCHEMA_FILE))?;
    Ok((params, ms, schema))
}

fn load_schedule(path: &Path) -> Result<MultivariateSchedule, Error> {
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let inner = value.get("schedule").cloned().unwrap_or(value);
    if let Some(weights) = inner.get("weights") {
        let weights: Vec<f64> = serde_json::from_value(weights.clone())?;
        return MultivariateSchedule::from_weights(&weights);
    }
    Ok(serde_json::from_value(inner)?)
}

fn execute(command: Command) -> Result<bool, Error> {
    match command {
        Command::Train { data, config, out, seed } => {
            let mut cfg = match config {
                Some(path) => TrainConfig::load(&path)?,
                None => TrainConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let table = Table::read_csv(&data)?;
            let schema = infer_schema(&table, cfg.numeric_bins)?;
            let dataset = encode(&table, &schema)?;
            fs::create_dir_all(&out)?;
            schema.save(&out.join(SCHEMA_FILE))?;
            let (outcome, diverged_at) = match train(&cfg, &dataset) {
                Ok(o) => (o, None),
                Err(Error::Diverged { epoch, last_finite }) => (*last_finite, Some(epoch)),
                Err(e) => return Err(e),
            };
            Checkpoint::new(&outcome.params, &outcome.schedule).save(&out.join(CHECKPOINT_FILE))?;
            outcome.history.write_jsonl(fs::File::create(out.join(HISTORY_FILE))?)?;
            print_json(&json!({
                "best_epoch": outcome.best_epoch,
                "best_val_loss": outcome.best_val_loss(),
                "schedule_weights": outcome.schedule.weights(),
                "parameter_count": outcome.params.parameter_count(),
                "diverged_at_epoch": diverged_at,
            }))?;
            if let Some(epoch) = diverged_at {
                eprintln!("error: training diverged at epoch {epoch}; wrote the last finite checkpoint");
            }
            Ok(diverged_at.is_none())
        }
        Command::Sample { ckpt, rows, out, seed } => {
            let (params, ms, schema) = load_model(&ckpt)?;
            let table = generator::synthesize_table(&params, &ms, &schema, rows, &mut substream(seed, 0))?;
            table.write_csv(&out)?;
            Ok(true)
        }
        Command::Eval { real, synth, schema } => {
            let schema = TableSchema::load(&schema)?;
            let report = fidelity_report(&Table::read_csv(&real)?, &Table::read_csv(&synth)?, &schema)?;
            print_json(&serde_json::to_value(report)?)?;
            Ok(true)
        }
        Command::Verify { suite, seed } => {
            let suite: Suite = suite.parse()?;
            let report = verify::run(suite, seed)?;
            print_json(&serde_json::to_value(&report)?)?;
            Ok(report.passed)
        }
        Command::OrderDist { schedule, exact, samples, seed } => {
            let ms = load_schedule(&schedule)?;
            let mut out = serde_json::Map::new();
            out.insert("weights".into(), json!(ms.weights()));
            if exact {
                out.insert("exact".into(), serde_json::to_value(exact_order_distribution(&ms)?)?);
            }
            if samples.is_some() || !exact {
                let n = samples.unwrap_or(DEFAULT_ORDER_SAMPLES);
                let dist = empirical_order_distribution(&ms, n, &mut substream(seed, 0))?;
                out.insert("samples".into(), json!(n));
                out.insert("empirical".into(), serde_json::to_value(dist)?);
            }
            print_json(&serde_json::Value::Object(out))?;
            Ok(true)
        }
        Command::ScheduleCurve { ckpt, out } => {
            let (_, ms, schema) = load_model(&ckpt)?;
            let mut header = vec!["t".to_string()];
            header.extend(schema.header());
            let rows = (0..CURVE_POINTS)
                .map(|i| {
                    let t = i as f64 / (CURVE_POINTS - 1) as f64;
                    let mut row = vec![t.to_string()];
                    row.extend(ms.iter().map(|s| s.keep_prob(t).to_string()));
                    row
                })
                .collect();
            Table::new(header, rows)?.write_csv(&out)?;
            Ok(true)
        }
    }
}
