//! Deterministic synthetic inputs: top-K traces with planted stable/unstable
//! heads, and key/value sequences for the attention oracle.
//!
//! Every head draws from its own ChaCha stream derived from the run seed, so
//! outputs are a pure function of `(Config, seed, arguments)` and do not
//! depend on generation order.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::config::Config;
use crate::trace::{TopKTrace, TraceError};
use crate::types::HeadId;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("top-K budget {k} exceeds the initial pool of {pool} pages")]
    BudgetExceedsPool { k: u32, pool: u32 },
    #[error("top-K budget {0} does not fit the trace format (max 65535)")]
    BudgetTooLarge(u32),
    #[error("persistence {0} outside [0, 1]")]
    BadPersistence(f64),
    #[error("planted head {0} outside the model")]
    HeadOutOfRange(HeadId),
    #[error("token count must be at least 1")]
    NoTokens,
    #[error(transparent)]
    Trace(#[from] TraceError),
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// An RNG for one independent stream of a seeded run.
pub fn stream_rng(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix64(seed);
    for &x in stream {
        s = splitmix64(s ^ x);
    }
    ChaCha8Rng::seed_from_u64(s)
}

const TRACE_STREAM: u64 = 0x7472_6163;
const KV_STREAM: u64 = 0x6b76;

#[derive(Debug, Clone)]
pub struct SynthTraceSpec {
    pub sample_id: String,
    pub planted_unstable: BTreeSet<HeadId>,
    /// Per-step retention probability of each selected page for stable heads.
    pub persistence: f64,
    pub steps: usize,
    /// Candidate pool size at step 0.
    pub initial_pool: u32,
}

/// Resample `prev` keeping each element with probability `keep`, refilling
/// uniformly from `[0, pool)` up to `k` distinct pages.
pub fn retain_and_refill<R: Rng>(
    rng: &mut R,
    prev: &[u32],
    keep: f64,
    k: usize,
    pool: u32,
) -> Vec<u32> {
    let k = k.min(pool as usize);
    let mut next: Vec<u32> = prev
        .iter()
        .copied()
        .filter(|_| rng.random_bool(keep))
        .collect();
    next.truncate(k);
    while next.len() < k {
        let p = rng.random_range(0..pool);
        if !next.contains(&p) {
            next.push(p);
        }
    }
    next
}

/// Uniform `k`-subset of `[0, pool)`.
pub fn uniform_subset<R: Rng>(rng: &mut R, k: usize, pool: u32) -> Vec<u32> {
    let k = k.min(pool as usize);
    index::sample(rng, pool as usize, k)
        .into_iter()
        .map(|i| i as u32)
        .collect()
}

/// Generate a trace where planted unstable heads draw an independent uniform
/// top-K set every step and all other heads evolve by per-element retention.
///
/// The candidate pool grows by one page every `page_size_tokens` steps.
pub fn gen_synthetic_trace(cfg: &Config, spec: &SynthTraceSpec) -> Result<TopKTrace, SynthError> {
    let k = cfg.topk_pages;
    if k > u16::MAX as u32 {
        return Err(SynthError::BudgetTooLarge(k));
    }
    if k > spec.initial_pool {
        return Err(SynthError::BudgetExceedsPool {
            k,
            pool: spec.initial_pool,
        });
    }
    if !(0.0..=1.0).contains(&spec.persistence) {
        return Err(SynthError::BadPersistence(spec.persistence));
    }
    let (layers, heads) = (cfg.num_layers, cfg.kv_heads_per_layer);
    if let Some(h) = spec
        .planted_unstable
        .iter()
        .find(|h| !h.in_bounds(layers, heads))
    {
        return Err(SynthError::HeadOutOfRange(*h));
    }

    let pool_at = |s: usize| spec.initial_pool + (s / cfg.page_size_tokens as usize) as u32;
    let n_heads = cfg.total_heads();

    // per_head[h][s] = selection
    let per_head: Vec<Vec<Vec<u32>>> = HeadId::all(layers, heads)
        .map(|head| {
            let mut rng = stream_rng(cfg.rng_seed, &[TRACE_STREAM, head.flat(heads) as u64]);
            let unstable = spec.planted_unstable.contains(&head);
            let mut out: Vec<Vec<u32>> = Vec::with_capacity(spec.steps);
            for s in 0..spec.steps {
                let pool = pool_at(s);
                let sel = match out.last() {
                    Some(prev) if !unstable => {
                        retain_and_refill(&mut rng, prev, spec.persistence, k as usize, pool)
                    }
                    _ => uniform_subset(&mut rng, k as usize, pool),
                };
                out.push(sel);
            }
            out
        })
        .collect();

    let mut trace = TopKTrace::new(spec.sample_id.clone(), layers, heads, k as u16);
    let mut step_sel = vec![Vec::new(); n_heads];
    for s in 0..spec.steps {
        for (sel, head) in step_sel.iter_mut().zip(&per_head) {
            sel.clone_from(&head[s]);
        }
        trace.push_step(pool_at(s), &step_sel)?;
    }
    Ok(trace)
}

/// Keys and values of one head, `tokens x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KvSequence {
    pub dim: usize,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

impl KvSequence {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, t: usize) -> &[f64] {
        &self.keys[t * self.dim..(t + 1) * self.dim]
    }

    pub fn value(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn push(&mut self, key: &[f64], value: &[f64]) {
        assert_eq!(key.len(), self.dim);
        assert_eq!(value.len(), self.dim);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
    }
}

/// Standard-normal keys and values for every head, in flat head order.
pub fn gen_synthetic_kv(
    cfg: &Config,
    tokens: usize,
    seed: u64,
) -> Result<Vec<KvSequence>, SynthError> {
    if tokens == 0 {
        return Err(SynthError::NoTokens);
    }
    let d = cfg.head_dim as usize;
    Ok((0..cfg.total_heads())
        .map(|h| {
            let mut rng = stream_rng(seed, &[KV_STREAM, h as u64]);
            let mut draw =
                |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
            let keys = draw(tokens * d);
            let values = draw(tokens * d);
            KvSequence {
                dim: d,
                keys,
                values,
            }
        })
        .collect())
}
