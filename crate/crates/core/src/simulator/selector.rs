use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scoring::TopKSet;
use crate::synth::stream_rng;
use crate::types::{HeadId, RequestId};

/// Chooses the top-K pages of a stable head at each rerank.
pub trait Selector {
    /// New selection over pages `0..pages`. `pinned` is always included.
    /// `old` is the previous selection, made `steps_since` decode steps ago.
    #[allow(clippy::too_many_arguments)]
    fn select(
        &mut self,
        req: RequestId,
        head: HeadId,
        pages: u32,
        pinned: Option<u32>,
        old: Option<&TopKSet>,
        steps_since: u64,
        epoch: u64,
    ) -> TopKSet;

    /// Drop any per-request state.
    fn forget(&mut self, _req: RequestId) {}
}

/// Top-K drift model: each previously selected page survives with
/// probability `persistence^steps_since`; the rest of the budget is refilled
/// uniformly from unselected pages.
#[derive(Debug, Clone)]
pub struct DriftSelector {
    k: usize,
    persistence: f64,
    seed: u64,
    rngs: HashMap<(RequestId, HeadId), ChaCha8Rng>,
}

impl DriftSelector {
    pub fn new(k: usize, persistence: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&persistence));
        Self {
            k,
            persistence,
            seed,
            rngs: HashMap::new(),
        }
    }
}

impl Selector for DriftSelector {
    fn select(
        &mut self,
        req: RequestId,
        head: HeadId,
        pages: u32,
        pinned: Option<u32>,
        old: Option<&TopKSet>,
        steps_since: u64,
        epoch: u64,
    ) -> TopKSet {
        let seed = self.seed;
        let rng = self
            .rngs
            .entry((req, head))
            .or_insert_with(|| stream_rng(seed, &[req.0, head.layer as u64, head.head as u64]));
        let budget = self.k.min(pages as usize);
        let mut chosen = vec![false; pages as usize];
        let mut count = 0;
        if let Some(p) = pinned.filter(|&p| p < pages && budget > 0) {
            chosen[p as usize] = true;
            count += 1;
        }
        if let Some(old) = old {
            let keep = self
                .persistence
                .powi(steps_since.min(i32::MAX as u64) as i32);
            for &p in old.pages() {
                if count == budget {
                    break;
                }
                if p < pages && !chosen[p as usize] && rng.random_bool(keep) {
                    chosen[p as usize] = true;
                    count += 1;
                }
            }
        }
        let rest: Vec<u32> = (0..pages).filter(|&p| !chosen[p as usize]).collect();
        for i in sample(rng, rest.len(), budget - count) {
            chosen[rest[i] as usize] = true;
        }
        TopKSet::from_pages((0..pages).filter(|&p| chosen[p as usize]), epoch)
    }

    fn forget(&mut self, req: RequestId) {
        self.rngs.retain(|(r, _), _| *r != req);
    }
}
