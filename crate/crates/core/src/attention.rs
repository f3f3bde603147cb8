//! Single-query decode attention, dense and restricted to selected pages.
//!
//! Used at toy scale as the numerical reference for page selection: sparse
//! attention over every page must reproduce dense attention, and a good
//! selection keeps the error small.

use thiserror::Error;

use crate::blocktable::BlockId;
use crate::scoring::{score_all, select_topk, MinMaxMeta, TopKSet};
use crate::synth::KvSequence;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("head {0} holds no tokens")]
    Empty(usize),
    #[error("head {0} does not exist")]
    UnknownHead(usize),
    #[error("vector of dimension {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("page {0} is outside the sequence")]
    PageOutOfRange(u32),
    #[error("page {0} maps to the null block")]
    NotResident(u32),
    #[error("query and state streams differ in length ({0} vs {1})")]
    StreamMismatch(usize, usize),
}

/// Keys and values of every head, viewed in pages of `page_size` tokens.
#[derive(Debug, Clone)]
pub struct AttentionState {
    page_size: usize,
    heads: Vec<KvSequence>,
}

impl AttentionState {
    pub fn new(page_size: usize, heads: Vec<KvSequence>) -> Self {
        assert!(page_size > 0);
        Self { page_size, heads }
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head(&self, head: usize) -> Result<&KvSequence, AttentionError> {
        self.heads
            .get(head)
            .ok_or(AttentionError::UnknownHead(head))
    }

    pub fn head_mut(&mut self, head: usize) -> Result<&mut KvSequence, AttentionError> {
        self.heads
            .get_mut(head)
            .ok_or(AttentionError::UnknownHead(head))
    }

    pub fn tokens(&self, head: usize) -> Result<usize, AttentionError> {
        Ok(self.head(head)?.len())
    }

    pub fn pages(&self, head: usize) -> Result<usize, AttentionError> {
        Ok(self.tokens(head)?.div_ceil(self.page_size))
    }

    /// Min/max key metadata of a head, page-aligned with this state.
    pub fn minmax(&self, head: usize) -> Result<MinMaxMeta, AttentionError> {
        let seq = self.head(head)?;
        let mut meta = MinMaxMeta::new(seq.dim, self.page_size as u32);
        for t in 0..seq.len() {
            meta.push_token(seq.key(t)).expect("dimension matches");
        }
        Ok(meta)
    }
}

fn attend(q: &[f64], seq: &KvSequence, tokens: impl Iterator<Item = usize> + Clone) -> Vec<f64> {
    let scale = 1.0 / (seq.dim as f64).sqrt();
    let logit = |t: usize| seq.key(t).iter().zip(q).map(|(k, q)| k * q).sum::<f64>() * scale;
    let max = tokens.clone().map(logit).fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; seq.dim];
    let mut denom = 0.0;
    for t in tokens {
        let w = (logit(t) - max).exp();
        denom += w;
        for (o, v) in out.iter_mut().zip(seq.value(t)) {
            *o += w * v;
        }
    }
    for o in &mut out {
        *o /= denom;
    }
    out
}

fn check_query(q: &[f64], seq: &KvSequence, head: usize) -> Result<(), AttentionError> {
    if seq.is_empty() {
        return Err(AttentionError::Empty(head));
    }
    if q.len() != seq.dim {
        return Err(AttentionError::DimensionMismatch {
            got: q.len(),
            expected: seq.dim,
        });
    }
    Ok(())
}

/// `softmax(q·Kᵀ/√d)·V` over every token of `head`.
pub fn dense_decode(
    q: &[f64],
    state: &AttentionState,
    head: usize,
) -> Result<Vec<f64>, AttentionError> {
    let seq = state.head(head)?;
    check_query(q, seq, head)?;
    Ok(attend(q, seq, 0..seq.len()))
}

/// Attention over the tokens of the pages in `topk` only.
pub fn sparse_decode(
    q: &[f64],
    state: &AttentionState,
    head: usize,
    topk: &TopKSet,
) -> Result<Vec<f64>, AttentionError> {
    let seq = state.head(head)?;
    check_query(q, seq, head)?;
    let pages = state.pages(head)?;
    if topk.is_empty() {
        return Err(AttentionError::Empty(head));
    }
    if let Some(&p) = topk.pages().iter().find(|&&p| p as usize >= pages) {
        return Err(AttentionError::PageOutOfRange(p));
    }
    let ps = state.page_size;
    let n = seq.len();
    let tokens = topk
        .pages()
        .iter()
        .flat_map(move |&p| p as usize * ps..((p as usize + 1) * ps).min(n));
    Ok(attend(q, seq, tokens))
}

/// [`sparse_decode`] after checking every selected page against the block
/// table mapping of the head.
pub fn sparse_decode_mapped(
    q: &[f64],
    state: &AttentionState,
    head: usize,
    topk: &TopKSet,
    mapping: &[BlockId],
) -> Result<Vec<f64>, AttentionError> {
    for &p in topk.pages() {
        match mapping.get(p as usize) {
            None => return Err(AttentionError::PageOutOfRange(p)),
            Some(b) if b.is_null() => return Err(AttentionError::NotResident(p)),
            Some(_) => {}
        }
    }
    sparse_decode(q, state, head, topk)
}

/// `|a − b|₂ / |b|₂`, or `|a − b|₂` when `b` is zero.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

/// How pages are chosen for each query.
#[derive(Debug, Clone)]
pub enum SparsityPolicy {
    /// Every page.
    Full,
    /// Highest min/max bound scores, `k` pages, last page pinned.
    MinMax(usize),
    /// Always the same pages.
    Fixed(TopKSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub per_step: Vec<f64>,
    pub mean: f64,
    pub p95: f64,
}

/// Relative L2 error of sparse against dense attention for each aligned
/// (query, state) pair.
pub fn sparsity_error(
    queries: &[Vec<f64>],
    states: &[AttentionState],
    head: usize,
    policy: &SparsityPolicy,
) -> Result<ErrorStats, AttentionError> {
    if queries.len() != states.len() {
        return Err(AttentionError::StreamMismatch(queries.len(), states.len()));
    }
    let mut per_step = Vec::with_capacity(queries.len());
    for (step, (q, state)) in queries.iter().zip(states).enumerate() {
        let pages = state.pages(head)?;
        let topk = match policy {
            SparsityPolicy::Full => TopKSet::from_pages(0..pages as u32, step as u64),
            SparsityPolicy::MinMax(k) => {
                let scores =
                    score_all(q, &state.minmax(head)?).map_err(|_| AttentionError::Empty(head))?;
                select_topk(&scores, *k, &[pages as u32 - 1], step as u64)
            }
            SparsityPolicy::Fixed(s) => s.clone(),
        };
        let dense = dense_decode(q, state, head)?;
        let sparse = sparse_decode(q, state, head, &topk)?;
        per_step.push(relative_l2(&sparse, &dense));
    }
    let mean = if per_step.is_empty() {
        0.0
    } else {
        per_step.iter().sum::<f64>() / per_step.len() as f64
    };
    let mut sorted = per_step.clone();
    sorted.sort_by(f64::total_cmp);
    let p95 = percentile(&sorted, 0.95);
    Ok(ErrorStats {
        per_step,
        mean,
        p95,
    })
}

/// Nearest-rank percentile of ascending `sorted`; 0 when empty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(rows: &[(Vec<f64>, Vec<f64>)], page: usize) -> AttentionState {
        let mut s = KvSequence::new(rows[0].0.len());
        for (k, v) in rows {
            s.push(k, v);
        }
        AttentionState::new(page, vec![s])
    }

    #[test]
    fn single_token_returns_its_value() {
        let st = state(&[(vec![0.3, -1.0], vec![4.0, 5.0])], 16);
        assert_eq!(dense_decode(&[1.0, 2.0], &st, 0).unwrap(), vec![4.0, 5.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let st = state(
            &[
                (vec![1.0, 1.0], vec![2.0, 0.0]),
                (vec![1.0, 1.0], vec![0.0, 4.0]),
            ],
            16,
        );
        assert_eq!(dense_decode(&[0.5, -0.5], &st, 0).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn empty_head_errors() {
        let st = AttentionState::new(16, vec![KvSequence::new(2)]);
        assert_eq!(
            dense_decode(&[0.0, 0.0], &st, 0),
            Err(AttentionError::Empty(0))
        );
    }

    #[test]
    fn huge_logits_stay_finite() {
        let st = state(
            &[
                (vec![1e3, 0.0], vec![1.0, 0.0]),
                (vec![-1e3, 0.0], vec![0.0, 1.0]),
            ],
            1,
        );
        let out = dense_decode(&[1e3, 0.0], &st, 0).unwrap();
        assert!(out.iter().all(|x| x.is_finite()));
        assert_eq!(out, vec![1.0, 0.0]);
    }

    #[test]
    fn null_mapped_page_is_refused() {
        let st = state(&[(vec![1.0], vec![1.0]), (vec![2.0], vec![2.0])], 1);
        let topk = TopKSet::from_pages([0, 1], 0);
        let mapping = [BlockId(3), BlockId(0)];
        assert_eq!(
            sparse_decode_mapped(&[1.0], &st, 0, &topk, &mapping),
            Err(AttentionError::NotResident(1))
        );
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&v, 0.5), 10.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }
}
