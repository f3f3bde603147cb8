//! Stability-aware hierarchical KV-cache management.
//!
//! The crate is organized bottom-up:
//!
//! - [`config`], [`types`], [`trace`], [`synth`]: shared domain types, the
//!   `FXTK` top-K trace container and deterministic synthetic generators.
//! - [`stability`]: random-corrected overlap, temporal stability scores,
//!   unstable-head classification and cross-task overlap.
//! - [`scoring`]: per-page min/max key metadata, query-aware page scores and
//!   top-K selection with stability-gated reranking.
//! - [`blocktable`]: per-(request, layer, head) logical to physical page
//!   mapping with a null block, dirty-segment sync and block recycling.
//! - [`tiering`]: slow-tier offload ledger, promoted-delta reloads and the
//!   link cost model.
//! - [`attention`]: dense and sparse decode attention used as a numerical
//!   oracle for page selection quality.
//! - [`simulator`]: discrete-event offline/online serving simulator.

pub mod attention;
pub mod blocktable;
pub mod config;
pub mod scoring;
pub mod simulator;
pub mod stability;
pub mod synth;
pub mod tiering;
pub mod trace;
pub mod types;

mod error;

pub use config::{Config, ConfigError};
pub use error::Error;
pub use types::{HeadId, Request, RequestId};

pub type Result<T, E = Error> = std::result::Result<T, E>;
