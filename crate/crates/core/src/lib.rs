//! Continuous-time masked discrete diffusion with per-position noise schedules.

pub mod denoiser;
pub mod error;
pub mod forward_process;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod orders;
pub mod quadrature;
pub mod schedule;
pub mod schedule_grad;
pub mod stats;
pub mod tabular;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
