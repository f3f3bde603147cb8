//! Query-aware page scoring over per-page min/max key bounds.
//!
//! Each page keeps the elementwise minimum and maximum of its keys. For a
//! query `q` the page score
//!
//! ```text
//! s_p = Σ_i max(q_i * kmin_{p,i}, q_i * kmax_{p,i})
//! ```
//!
//! is the largest dot product `q·k` over the page's bounding box, so it upper
//! bounds the attention logit of every key actually stored in the page.

mod minmax;
mod schedule;

pub use minmax::{update_minmax, MinMaxCache, MinMaxMeta, PAGES_PER_META_BLOCK};
pub use schedule::{layer_scoring_skipped, rerank_due, score_evaluations, RerankMode};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("page {0} does not exist")]
    UnknownPage(u32),
    #[error("page {page} already holds {capacity} keys")]
    PageFull { page: u32, capacity: u32 },
    #[error("page {0} holds no keys")]
    EmptyPage(u32),
    #[error("vector of dimension {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// Upper bound of `q·k` over the box `[kmin, kmax]`.
pub fn bound_score(q: &[f64], kmin: &[f64], kmax: &[f64]) -> f64 {
    q.iter()
        .zip(kmin.iter().zip(kmax))
        .map(|(&qi, (&lo, &hi))| (qi * lo).max(qi * hi))
        .sum()
}

/// Score of `page` for query `q`.
pub fn score_page(q: &[f64], meta: &MinMaxMeta, page: u32) -> Result<f64, ScoringError> {
    if q.len() != meta.dim() {
        return Err(ScoringError::DimensionMismatch {
            got: q.len(),
            expected: meta.dim(),
        });
    }
    let (lo, hi) = meta.bounds(page)?;
    Ok(bound_score(q, lo, hi))
}

/// Scores of every non-empty page; empty pages score `-inf`.
pub fn score_all(q: &[f64], meta: &MinMaxMeta) -> Result<Vec<f64>, ScoringError> {
    (0..meta.pages() as u32)
        .map(|p| match score_page(q, meta, p) {
            Err(ScoringError::EmptyPage(_)) => Ok(f64::NEG_INFINITY),
            r => r,
        })
        .collect()
}

/// Pages a head attends to, ascending, with the decode step it was chosen at.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TopKSet {
    pages: Vec<u32>,
    pub epoch: u64,
}

impl TopKSet {
    pub fn from_pages(pages: impl IntoIterator<Item = u32>, epoch: u64) -> Self {
        let mut pages: Vec<u32> = pages.into_iter().collect();
        pages.sort_unstable();
        pages.dedup();
        Self { pages, epoch }
    }

    pub fn pages(&self) -> &[u32] {
        &self.pages
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }

    pub fn contains(&self, page: u32) -> bool {
        self.pages.binary_search(&page).is_ok()
    }

    /// Pages in `self` but not in `other`, ascending.
    pub fn difference(&self, other: &TopKSet) -> Vec<u32> {
        self.pages
            .iter()
            .copied()
            .filter(|&p| !other.contains(p))
            .collect()
    }
}

/// Select `pinned` plus the highest-scoring other pages, `min(k, pages)` in
/// total. Ties go to the lower page index. Pinned pages outside the pool are
/// ignored; if more than `k` are pinned the highest-scoring `k` are kept.
pub fn select_topk(scores: &[f64], k: usize, pinned: &[u32], epoch: u64) -> TopKSet {
    let n = scores.len();
    let budget = k.min(n);
    let key = |p: u32| {
        let s = scores[p as usize];
        if s.is_nan() {
            f64::NEG_INFINITY
        } else {
            s
        }
    };
    let rank = |a: &u32, b: &u32| key(*b).total_cmp(&key(*a)).then(a.cmp(b));

    let mut pins: Vec<u32> = pinned
        .iter()
        .copied()
        .filter(|&p| (p as usize) < n)
        .collect();
    pins.sort_unstable();
    pins.dedup();
    if pins.len() > budget {
        pins.sort_by(rank);
        pins.truncate(budget);
    }
    let mut rest: Vec<u32> = (0..n as u32)
        .filter(|p| pins.binary_search(p).is_err())
        .collect();
    let take = budget - pins.len();
    if take < rest.len() {
        if take > 0 {
            rest.select_nth_unstable_by(take - 1, rank);
        }
        rest.truncate(take);
    }
    TopKSet::from_pages(pins.into_iter().chain(rest), epoch)
}
