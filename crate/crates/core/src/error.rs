use thiserror::Error;

use crate::attention::AttentionError;
use crate::blocktable::BlockTableError;
use crate::config::ConfigError;
use crate::scoring::ScoringError;
use crate::simulator::SimError;
use crate::stability::StabilityError;
use crate::synth::SynthError;
use crate::tiering::TieringError;
use crate::trace::TraceError;

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    BlockTable(#[from] BlockTableError),
    #[error(transparent)]
    Tiering(#[from] TieringError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Sim(#[from] SimError),
}
