//! Temporal stability of per-head top-K page selection.
//!
//! The random-corrected overlap (RCO) of two selections `A`, `B` of `K` pages
//! drawn from a pool of `N_t` candidates is
//!
//! ```text
//! RCO = max(0, (|A ∩ B| / K - K / N_t) / (1 - K / N_t))
//! ```
//!
//! i.e. the observed overlap fraction with the hypergeometric chance level
//! `K / N_t` subtracted, rescaled so identical sets score 1. A head's temporal
//! stability score for a window starting at step `s` is the mean RCO between
//! `S(s)` and `S(s + Δ)` over `Δ = 1..W-1`.

mod classify;
mod overlap;
mod report;

pub use classify::{classify_heads, HeadProfile, HeadStats};
pub use overlap::{cross_task_overlap, OverlapMatrix};
pub use report::StabilityReport;

use thiserror::Error;

use crate::trace::TopKTrace;
use crate::types::HeadId;

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("degenerate pool: K={k} >= N_t={pool}")]
    DegeneratePool { k: usize, pool: u32 },
    #[error("selection sizes {a} and {b} differ from K={k}")]
    SizeMismatch { a: usize, b: usize, k: usize },
    #[error("page index {index} outside pool of {pool}")]
    IndexOutOfPool { index: u32, pool: u32 },
    #[error("window [{start}, {start}+{window}) exceeds trace of {steps} steps")]
    WindowExceedsTrace {
        start: usize,
        window: usize,
        steps: usize,
    },
    #[error("window size must be at least 2")]
    WindowTooSmall,
    #[error("every pair in the window starting at {start} is degenerate")]
    AllPairsDegenerate { start: usize },
    #[error("no stability reports or no usable windows")]
    NoWindows,
    #[error("fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unstable-set cardinality mismatch: {0} vs {1}")]
    CardinalityMismatch(usize, usize),
    #[error("at least one profile with a non-empty unstable set is required")]
    EmptyProfiles,
    #[error("profile parse error at line {line}: {reason}")]
    ProfileFormat { line: usize, reason: String },
    #[error("profile I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Number of common elements of two ascending, duplicate-free slices.
pub(crate) fn sorted_intersection(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn rco_from_overlap(overlap: usize, k: usize, pool: u32) -> f64 {
    let chance = k as f64 / pool as f64;
    let v = (overlap as f64 / k as f64 - chance) / (1.0 - chance);
    v.clamp(0.0, 1.0)
}

/// Random-corrected overlap of two `k`-page selections from a pool of `pool`.
pub fn rco(a: &[u32], b: &[u32], k: usize, pool: u32) -> Result<f64, StabilityError> {
    if k == 0 || k as u64 >= pool as u64 {
        return Err(StabilityError::DegeneratePool { k, pool });
    }
    if a.len() != k || b.len() != k {
        return Err(StabilityError::SizeMismatch {
            a: a.len(),
            b: b.len(),
            k,
        });
    }
    if let Some(&index) = a.iter().chain(b).find(|&&p| p >= pool) {
        return Err(StabilityError::IndexOutOfPool { index, pool });
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable();
    sb.sort_unstable();
    Ok(rco_from_overlap(sorted_intersection(&sa, &sb), k, pool))
}

/// Temporal stability of one head over one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStability {
    pub value: f64,
    /// Pairs that contributed to the mean.
    pub pairs: usize,
    /// Pairs skipped because the pool was not larger than K.
    pub excluded: usize,
}

/// RCO between steps `s` and `t` of a head, or `None` for a degenerate pair.
///
/// Uses the pool size at the later step `t`. `sorted` caches ascending copies
/// of the selections.
pub(crate) fn pair_rco(
    trace: &TopKTrace,
    sorted: &SortedSelections,
    head: HeadId,
    s: usize,
    t: usize,
) -> Option<f64> {
    let k = trace.k() as usize;
    let pool = trace.pool_at(t);
    let a = sorted.get(s, head);
    let b = sorted.get(t, head);
    if k as u64 >= pool as u64 || a.len() != k || b.len() != k {
        return None;
    }
    Some(rco_from_overlap(sorted_intersection(a, b), k, pool))
}

/// Ascending copies of every selection in a trace.
pub(crate) struct SortedSelections {
    heads: u16,
    n_heads: usize,
    sets: Vec<Vec<u32>>,
}

impl SortedSelections {
    pub(crate) fn new(trace: &TopKTrace) -> Self {
        let heads = trace.heads_per_layer();
        let n_heads = trace.layers() as usize * heads as usize;
        let mut sets = Vec::with_capacity(trace.steps() * n_heads);
        for s in 0..trace.steps() {
            for h in HeadId::all(trace.layers(), heads) {
                let mut v = trace.selection(s, h).to_vec();
                v.sort_unstable();
                sets.push(v);
            }
        }
        Self {
            heads,
            n_heads,
            sets,
        }
    }

    fn get(&self, step: usize, head: HeadId) -> &[u32] {
        &self.sets[step * self.n_heads + head.flat(self.heads)]
    }
}

pub(crate) fn window_stability(
    trace: &TopKTrace,
    sorted: &SortedSelections,
    head: HeadId,
    start: usize,
    window: usize,
) -> Result<WindowStability, StabilityError> {
    if window < 2 {
        return Err(StabilityError::WindowTooSmall);
    }
    if start + window > trace.steps() {
        return Err(StabilityError::WindowExceedsTrace {
            start,
            window,
            steps: trace.steps(),
        });
    }
    let mut sum = 0.0;
    let mut pairs = 0;
    let mut excluded = 0;
    for t in start + 1..start + window {
        match pair_rco(trace, sorted, head, start, t) {
            Some(v) => {
                sum += v;
                pairs += 1;
            }
            None => excluded += 1,
        }
    }
    if pairs == 0 {
        return Err(StabilityError::AllPairsDegenerate { start });
    }
    Ok(WindowStability {
        value: sum / pairs as f64,
        pairs,
        excluded,
    })
}

/// Temporal stability score of `head` for the window of `window` steps
/// starting at `start`: the mean RCO against each of the next `window - 1`
/// steps. Degenerate pairs are excluded from the mean.
pub fn temporal_stability(
    trace: &TopKTrace,
    head: HeadId,
    start: usize,
    window: usize,
) -> Result<WindowStability, StabilityError> {
    if start + window > trace.steps() {
        return Err(StabilityError::WindowExceedsTrace {
            start,
            window,
            steps: trace.steps(),
        });
    }
    let sorted = SortedSelections::new(trace);
    window_stability(trace, &sorted, head, start, window)
}
