//! Serving simulator.
//!
//! The whole batch advances in synchronous ticks. A tick either prefills the
//! requests admitted at its start or runs one decode step for every running,
//! unpaused request. Transfers run on a full-duplex link model and complete
//! in simulated time; their effects are applied at the next tick boundary.
//!
//! Admission is FCFS against byte reservations on the fast tier. A dense
//! request reserves its peak KV footprint. A flexicache request reserves the
//! same until its post-prefill offload lands, then shrinks to the
//! steady-state bound of full unstable heads plus top-K (with a little
//! append slack) stable heads, plus min/max metadata.

mod cost;
mod engine;
mod report;
mod selector;
mod workload;

pub use cost::CostModel;
pub use engine::{run, run_offline, run_online, SimOptions};
pub use report::{LatencyStats, RequestMetrics, SimReport};
pub use selector::{DriftSelector, Selector};
pub use workload::{offline_workload, poisson_arrivals, WorkloadSpec};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::blocktable::BlockTableError;
use crate::config::Config;
use crate::tiering::TieringError;
use crate::types::RequestId;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("request {req} needs {needed} fast-tier bytes, capacity is {capacity}")]
    Infeasible {
        req: RequestId,
        needed: u64,
        capacity: u64,
    },
    #[error("profile is {0}x{1} heads, config is {2}x{3}")]
    ProfileMismatch(u16, u16, u16, u16),
    #[error("arrival rate must be positive, got {0}")]
    BadRate(f64),
    #[error("bad workload: {0}")]
    BadWorkload(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Table(#[from] BlockTableError),
    #[error(transparent)]
    Tiering(#[from] TieringError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Every page of every head stays fast-resident.
    Dense,
    /// Stable heads keep only their top-K pages in the fast tier.
    FlexiCache,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Dense => "dense",
            Policy::FlexiCache => "flexicache",
        })
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(Policy::Dense),
            "flexicache" => Ok(Policy::FlexiCache),
            _ => Err(format!(
                "unknown policy `{s}` (expected dense or flexicache)"
            )),
        }
    }
}

/// Fraction of dense fast-tier KV bytes saved at `seq_tokens` when unstable
/// heads keep every page and stable heads keep `min(K, N)` pages, the partial
/// last page counted among the K.
pub fn memory_savings(seq_tokens: u64, cfg: &Config) -> f64 {
    let n = cfg.pages_for(seq_tokens).max(1) as f64;
    let k = (cfg.topk_pages as f64).min(n);
    (1.0 - cfg.unstable_fraction) * (1.0 - k / n)
}
