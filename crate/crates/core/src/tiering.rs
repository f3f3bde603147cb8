//! Slow-tier residency and link transfers.
//!
//! Stable-head pages are copied to the slow tier once: the full prompt pages
//! in one offload after prefill, and every later page as it fills. Unstable
//! heads stay entirely fast-resident. After a rerank only the promoted delta
//! is reloaded.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::blocktable::{BlockTable, BlockTableError};
use crate::config::Config;
use crate::scoring::TopKSet;
use crate::stability::HeadProfile;
use crate::types::{HeadId, RequestId};

#[derive(Debug, Error, PartialEq)]
pub enum TieringError {
    #[error("request {0} was already offloaded after prefill")]
    AlreadyOffloaded(RequestId),
    #[error("request {req} {head} page {page} already has a slow-tier copy")]
    PageAlreadyOffloaded {
        req: RequestId,
        head: HeadId,
        page: u32,
    },
    #[error("request {req} {head} page {page} is not full")]
    PageNotFull {
        req: RequestId,
        head: HeadId,
        page: u32,
    },
    #[error("request {req} {head} page {page} offloaded out of order (next is {next})")]
    OutOfOrder {
        req: RequestId,
        head: HeadId,
        page: u32,
        next: u32,
    },
    #[error("request {req} {head} page {page} has no slow-tier copy")]
    MissingCopy {
        req: RequestId,
        head: HeadId,
        page: u32,
    },
    #[error("{0} is unstable and never leaves the fast tier")]
    UnstableHead(HeadId),
    #[error("slow tier full: {needed} bytes needed, {free} free")]
    SlowTierFull { needed: u64, free: u64 },
    #[error(transparent)]
    Table(#[from] BlockTableError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Fast to slow.
    Offload,
    /// Slow to fast.
    Reload,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Offload => "offload",
            Direction::Reload => "reload",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Priority {
    /// Overlapped with the owning request's compute.
    Background,
    /// The owning request waits for it.
    Pausing,
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Priority::Background => "background",
            Priority::Pausing => "pausing",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferEvent {
    pub direction: Direction,
    pub request: RequestId,
    pub heads: Vec<HeadId>,
    pub bytes: u64,
    pub issue_time_s: f64,
    pub completion_time_s: f64,
    pub priority: Priority,
}

/// `latency + bytes / bandwidth`.
pub fn transfer_time(bytes: u64, cfg: &Config) -> f64 {
    cfg.link_latency_s + bytes as f64 / cfg.link_bandwidth_bytes_per_s
}

/// Transfer split into `transfer_chunk_bytes` chunks, each paying the latency.
pub fn chunked_transfer_time(bytes: u64, cfg: &Config) -> f64 {
    let chunks = bytes.div_ceil(cfg.transfer_chunk_bytes).max(1);
    cfg.link_latency_s * chunks as f64 + bytes as f64 / cfg.link_bandwidth_bytes_per_s
}

/// Pages in `new` that were not in `old`.
pub fn promoted_delta(old: &TopKSet, new: &TopKSet) -> Vec<u32> {
    new.difference(old)
}

/// Full-duplex link; each direction serves transfers in FIFO order.
#[derive(Debug, Clone, Default)]
pub struct Link {
    busy_until: [f64; 2],
}

impl Link {
    pub fn new() -> Self {
        Self::default()
    }

    fn lane(dir: Direction) -> usize {
        match dir {
            Direction::Offload => 0,
            Direction::Reload => 1,
        }
    }

    /// Queue `bytes` that become ready at `ready_s`. Returns (start, completion).
    pub fn schedule(
        &mut self,
        dir: Direction,
        bytes: u64,
        ready_s: f64,
        cfg: &Config,
    ) -> (f64, f64) {
        let lane = &mut self.busy_until[Self::lane(dir)];
        let start = ready_s.max(*lane);
        let done = start + chunked_transfer_time(bytes, cfg);
        *lane = done;
        (start, done)
    }

    pub fn busy_until(&self, dir: Direction) -> f64 {
        self.busy_until[Self::lane(dir)]
    }
}

#[derive(Debug, Clone, Default)]
struct HeadLedger {
    /// Slow-tier writes per page; only 0 or 1.
    writes: Vec<u8>,
    /// Time each written copy becomes readable.
    ready_at: Vec<f64>,
}

/// Slow-tier page copies of stable heads plus the offload-once ledger.
#[derive(Debug, Clone)]
pub struct TierStore {
    page_bytes: u64,
    page_size: u32,
    capacity: u64,
    used: u64,
    ledgers: HashMap<(RequestId, HeadId), HeadLedger>,
    prefilled: HashMap<RequestId, u64>,
    stable: Vec<HeadId>,
    unstable_mask: Vec<bool>,
    heads_per_layer: u16,
}

impl TierStore {
    pub fn new(cfg: &Config, profile: &HeadProfile) -> Self {
        let heads_per_layer = profile.heads_per_layer();
        let mut unstable_mask = vec![false; profile.n_heads()];
        for h in profile.unstable() {
            unstable_mask[h.flat(heads_per_layer)] = true;
        }
        Self {
            page_bytes: cfg.page_bytes(),
            page_size: cfg.page_size_tokens,
            capacity: cfg.slow_tier_capacity_bytes,
            used: 0,
            ledgers: HashMap::new(),
            prefilled: HashMap::new(),
            stable: profile.stable().collect(),
            unstable_mask,
            heads_per_layer,
        }
    }

    pub fn used_bytes(&self) -> u64 {
        self.used
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity
    }

    pub fn stable_heads(&self) -> &[HeadId] {
        &self.stable
    }

    fn is_unstable(&self, head: HeadId) -> bool {
        self.unstable_mask
            .get(head.flat(self.heads_per_layer))
            .copied()
            .unwrap_or(false)
    }

    fn reserve(&mut self, bytes: u64) -> Result<(), TieringError> {
        let free = self.capacity.saturating_sub(self.used);
        if bytes > free {
            return Err(TieringError::SlowTierFull {
                needed: bytes,
                free,
            });
        }
        self.used += bytes;
        Ok(())
    }

    /// Copy every full prompt page of every stable head to the slow tier.
    pub fn offload_after_prefill(
        &mut self,
        req: RequestId,
        prompt_tokens: u64,
        now: f64,
        link: &mut Link,
        cfg: &Config,
    ) -> Result<TransferEvent, TieringError> {
        if self.prefilled.contains_key(&req) {
            return Err(TieringError::AlreadyOffloaded(req));
        }
        let full = prompt_tokens / self.page_size as u64;
        let bytes = full * self.page_bytes * self.stable.len() as u64;
        self.reserve(bytes)?;
        let (issue, done) = link.schedule(Direction::Offload, bytes, now, cfg);
        for &head in &self.stable {
            let l = self.ledgers.entry((req, head)).or_default();
            l.writes = vec![1; full as usize];
            l.ready_at = vec![done; full as usize];
        }
        self.prefilled.insert(req, full);
        Ok(TransferEvent {
            direction: Direction::Offload,
            request: req,
            heads: self.stable.clone(),
            bytes,
            issue_time_s: issue,
            completion_time_s: done,
            priority: Priority::Background,
        })
    }

    /// Copy a page that just filled, for each of `heads`.
    ///
    /// `fill` is the number of tokens in the page.
    #[allow(clippy::too_many_arguments)]
    pub fn incremental_offload(
        &mut self,
        req: RequestId,
        heads: &[HeadId],
        page: u32,
        fill: u32,
        now: f64,
        link: &mut Link,
        cfg: &Config,
    ) -> Result<TransferEvent, TieringError> {
        for &head in heads {
            if self.is_unstable(head) {
                return Err(TieringError::UnstableHead(head));
            }
            if fill < self.page_size {
                return Err(TieringError::PageNotFull { req, head, page });
            }
            let next = self
                .ledgers
                .get(&(req, head))
                .map_or(0, |l| l.writes.len() as u32);
            if page < next {
                return Err(TieringError::PageAlreadyOffloaded { req, head, page });
            }
            if page > next {
                return Err(TieringError::OutOfOrder {
                    req,
                    head,
                    page,
                    next,
                });
            }
        }
        let bytes = self.page_bytes * heads.len() as u64;
        self.reserve(bytes)?;
        let (issue, done) = link.schedule(Direction::Offload, bytes, now, cfg);
        for &head in heads {
            let l = self.ledgers.entry((req, head)).or_default();
            l.writes.push(1);
            l.ready_at.push(done);
        }
        Ok(TransferEvent {
            direction: Direction::Offload,
            request: req,
            heads: heads.to_vec(),
            bytes,
            issue_time_s: issue,
            completion_time_s: done,
            priority: Priority::Background,
        })
    }

    /// Slow-tier writes of a page so far (0 or 1).
    pub fn writes(&self, req: RequestId, head: HeadId, page: u32) -> u8 {
        self.ledgers
            .get(&(req, head))
            .and_then(|l| l.writes.get(page as usize).copied())
            .unwrap_or(0)
    }

    /// Pages of `head` with a slow-tier copy (possibly still in flight).
    pub fn offloaded_pages(&self, req: RequestId, head: HeadId) -> u32 {
        self.ledgers
            .get(&(req, head))
            .map_or(0, |l| l.writes.len() as u32)
    }

    pub fn has_copy(&self, req: RequestId, head: HeadId, page: u32) -> bool {
        self.writes(req, head, page) == 1
    }

    /// When the copy of `page` becomes readable, if it was ever written.
    pub fn ready_at(&self, req: RequestId, head: HeadId, page: u32) -> Option<f64> {
        self.ledgers
            .get(&(req, head))
            .and_then(|l| l.ready_at.get(page as usize).copied())
    }

    /// Reload the promoted pages of each head in one pausing transfer.
    ///
    /// The transfer starts once the promoted copies are readable and after
    /// `not_before`, which callers use to wait for evicted pages still in
    /// flight to the slow tier.
    pub fn reload(
        &self,
        req: RequestId,
        promoted: &[(HeadId, Vec<u32>)],
        not_before: f64,
        link: &mut Link,
        cfg: &Config,
    ) -> Result<TransferEvent, TieringError> {
        let mut ready = not_before;
        let mut pages = 0u64;
        for (head, ps) in promoted {
            if self.is_unstable(*head) {
                return Err(TieringError::UnstableHead(*head));
            }
            for &p in ps {
                let t = self
                    .ready_at(req, *head, p)
                    .ok_or(TieringError::MissingCopy {
                        req,
                        head: *head,
                        page: p,
                    })?;
                ready = ready.max(t);
                pages += 1;
            }
        }
        let bytes = pages * self.page_bytes;
        let (issue, done) = link.schedule(Direction::Reload, bytes, ready, cfg);
        Ok(TransferEvent {
            direction: Direction::Reload,
            request: req,
            heads: promoted.iter().map(|(h, _)| *h).collect(),
            bytes,
            issue_time_s: issue,
            completion_time_s: done,
            priority: Priority::Pausing,
        })
    }

    /// Drop every copy of a finished request.
    pub fn remove_request(&mut self, req: RequestId) {
        let mut freed = 0;
        self.ledgers.retain(|(r, _), l| {
            if *r == req {
                freed += l.writes.len() as u64;
                false
            } else {
                true
            }
        });
        self.prefilled.remove(&req);
        self.used -= freed * self.page_bytes;
    }

    /// Every ledger entry is 0 or 1 and unstable heads hold nothing.
    pub fn check(&self) -> Result<(), String> {
        for ((req, head), l) in &self.ledgers {
            if self.is_unstable(*head) && !l.writes.is_empty() {
                return Err(format!(
                    "unstable {head} of request {req} has slow-tier pages"
                ));
            }
            if let Some(p) = l.writes.iter().position(|&w| w != 1) {
                return Err(format!(
                    "request {req} {head} page {p} written {} times",
                    l.writes[p]
                ));
            }
        }
        Ok(())
    }
}

/// Evict the fast blocks of `head` pages below `below` that are outside
/// `topk` and already copied to the slow tier. Returns the pages evicted.
pub fn release_non_topk(
    table: &mut BlockTable,
    store: &TierStore,
    req: RequestId,
    head: HeadId,
    topk: &TopKSet,
    below: u32,
) -> Result<Vec<u32>, TieringError> {
    let resident = table.resident_pages(req, head)?;
    let mut evicted = Vec::new();
    for p in resident {
        if p < below && !topk.contains(p) && store.has_copy(req, head, p) {
            table.evict_to_null(req, head, p)?;
            evicted.push(p);
        }
    }
    Ok(evicted)
}

/// Completed transfers, in issue order.
#[derive(Debug, Clone, Default)]
pub struct TransferLog {
    pub events: Vec<TransferEvent>,
}

impl TransferLog {
    pub fn push(&mut self, e: TransferEvent) {
        self.events.push(e);
    }

    pub fn bytes(&self, dir: Direction) -> u64 {
        self.events
            .iter()
            .filter(|e| e.direction == dir)
            .map(|e| e.bytes)
            .sum()
    }

    /// `direction,bytes,issue_s,completion_s,request,priority`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("direction,bytes,issue_s,completion_s,request,priority\n");
        for e in &self.events {
            let _ = writeln!(
                out,
                "{},{},{:.9},{:.9},{},{}",
                e.direction, e.bytes, e.issue_time_s, e.completion_time_s, e.request, e.priority
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Config, HeadProfile) {
        let cfg = Config {
            num_layers: 1,
            kv_heads_per_layer: 4,
            ..Config::default()
        };
        let profile = HeadProfile::from_unstable("m", 1, 4, [HeadId::new(0, 0)]).unwrap();
        (cfg, profile)
    }

    #[test]
    fn transfer_time_units() {
        let mut cfg = Config::default();
        assert_eq!(transfer_time(0, &cfg), cfg.link_latency_s);
        cfg.link_latency_s = 0.0;
        cfg.link_bandwidth_bytes_per_s = 64e9;
        assert_eq!(transfer_time(64_000_000_000, &cfg), 1.0);
    }

    #[test]
    fn transfer_time_arithmetic() {
        let cfg = Config::default();
        let t = transfer_time(192_000_000, &cfg);
        assert!((t - (0.006 + 10e-6)).abs() < 1e-15);
    }

    #[test]
    fn chunking_pays_latency_per_chunk() {
        let cfg = Config::default();
        let bytes = 3 * cfg.transfer_chunk_bytes + 1;
        let t = chunked_transfer_time(bytes, &cfg);
        let expect = 4.0 * cfg.link_latency_s + bytes as f64 / cfg.link_bandwidth_bytes_per_s;
        assert!((t - expect).abs() < 1e-15);
        assert_eq!(chunked_transfer_time(0, &cfg), cfg.link_latency_s);
    }

    #[test]
    fn link_directions_are_independent_fifos() {
        let cfg = Config::default();
        let mut link = Link::new();
        let (s1, d1) = link.schedule(Direction::Offload, 1 << 20, 0.0, &cfg);
        let (s2, _) = link.schedule(Direction::Offload, 1 << 20, 0.0, &cfg);
        let (s3, _) = link.schedule(Direction::Reload, 1 << 20, 0.0, &cfg);
        assert_eq!(s1, 0.0);
        assert_eq!(s2, d1);
        assert_eq!(s3, 0.0);
    }

    #[test]
    fn prefill_offload_covers_stable_full_pages_once() {
        let (cfg, profile) = setup();
        let mut store = TierStore::new(&cfg, &profile);
        let mut link = Link::new();
        let r = RequestId(3);
        let e = store
            .offload_after_prefill(r, 10_000, 0.0, &mut link, &cfg)
            .unwrap();
        assert_eq!(e.bytes, 625 * cfg.page_bytes() * 3);
        assert_eq!(e.priority, Priority::Background);
        assert_eq!(store.writes(r, HeadId::new(0, 1), 624), 1);
        assert_eq!(store.writes(r, HeadId::new(0, 0), 0), 0);
        assert_eq!(
            store.offload_after_prefill(r, 10_000, 1.0, &mut link, &cfg),
            Err(TieringError::AlreadyOffloaded(r))
        );
        store.check().unwrap();
    }

    #[test]
    fn incremental_offload_rules() {
        let (cfg, profile) = setup();
        let mut store = TierStore::new(&cfg, &profile);
        let mut link = Link::new();
        let r = RequestId(0);
        let h = HeadId::new(0, 2);
        store
            .offload_after_prefill(r, 20, 0.0, &mut link, &cfg)
            .unwrap();
        let e = store
            .incremental_offload(r, &[h], 1, 16, 1.0, &mut link, &cfg)
            .unwrap();
        assert_eq!(e.bytes, cfg.page_bytes());
        assert!(matches!(
            store.incremental_offload(r, &[h], 2, 5, 1.0, &mut link, &cfg),
            Err(TieringError::PageNotFull { .. })
        ));
        assert!(matches!(
            store.incremental_offload(r, &[h], 1, 16, 1.0, &mut link, &cfg),
            Err(TieringError::PageAlreadyOffloaded { .. })
        ));
        assert!(matches!(
            store.incremental_offload(r, &[HeadId::new(0, 0)], 1, 16, 1.0, &mut link, &cfg),
            Err(TieringError::UnstableHead(_))
        ));
    }

    #[test]
    fn short_prompt_still_copies_full_pages() {
        let (cfg, profile) = setup();
        let mut store = TierStore::new(&cfg, &profile);
        let mut link = Link::new();
        let e = store
            .offload_after_prefill(RequestId(1), 40, 0.0, &mut link, &cfg)
            .unwrap();
        assert_eq!(e.bytes, 2 * cfg.page_bytes() * 3);
    }

    #[test]
    fn slow_tier_capacity_is_enforced() {
        let (mut cfg, profile) = setup();
        cfg.slow_tier_capacity_bytes = cfg.page_bytes() * 5;
        let mut store = TierStore::new(&cfg, &profile);
        let mut link = Link::new();
        assert!(matches!(
            store.offload_after_prefill(RequestId(1), 32, 0.0, &mut link, &cfg),
            Err(TieringError::SlowTierFull { .. })
        ));
        store
            .offload_after_prefill(RequestId(2), 16, 0.0, &mut link, &cfg)
            .unwrap();
        assert_eq!(store.used_bytes(), 3 * cfg.page_bytes());
        store.remove_request(RequestId(2));
        assert_eq!(store.used_bytes(), 0);
    }

    #[test]
    fn promoted_delta_cases() {
        let a = TopKSet::from_pages(0..4, 0);
        assert!(promoted_delta(&a, &a).is_empty());
        let b = TopKSet::from_pages(4..8, 1);
        assert_eq!(promoted_delta(&a, &b), vec![4, 5, 6, 7]);
    }

    #[test]
    fn reload_waits_for_copies_and_sizes_by_delta() {
        let (cfg, profile) = setup();
        let mut store = TierStore::new(&cfg, &profile);
        let mut link = Link::new();
        let r = RequestId(0);
        let off = store
            .offload_after_prefill(r, 160, 0.0, &mut link, &cfg)
            .unwrap();
        let e = store
            .reload(
                r,
                &[
                    (HeadId::new(0, 1), vec![2, 3]),
                    (HeadId::new(0, 3), vec![7]),
                ],
                0.0,
                &mut link,
                &cfg,
            )
            .unwrap();
        assert_eq!(e.bytes, 3 * cfg.page_bytes());
        assert_eq!(e.issue_time_s, off.completion_time_s);
        assert!(e.completion_time_s >= e.issue_time_s + transfer_time(e.bytes, &cfg));
        assert!(store
            .reload(r, &[(HeadId::new(0, 1), vec![99])], 0.0, &mut link, &cfg)
            .is_err());
    }

    #[test]
    fn residency_after_prefill_offload() {
        // 10k tokens, K = 64: each stable head keeps 64 pages of which one may be partial
        let (cfg, profile) = setup();
        let mut store = TierStore::new(&cfg, &profile);
        let mut link = Link::new();
        let mut table = BlockTable::new(1, 4, 4000);
        let r = RequestId(0);
        table.add_request(r).unwrap();
        let tokens = 10_008u64;
        let pages = cfg.pages_for(tokens) as u32;
        for h in HeadId::all(1, 4) {
            for _ in 0..pages {
                table.allocate_page(r, h).unwrap();
            }
        }
        store
            .offload_after_prefill(r, tokens, 0.0, &mut link, &cfg)
            .unwrap();
        let partial = pages - 1;
        let topk = TopKSet::from_pages((0..63).map(|i| i * 9).chain([partial]), 0);
        for &h in &store.stable_heads().to_vec() {
            release_non_topk(&mut table, &store, r, h, &topk, pages).unwrap();
            assert_eq!(table.resident_pages(r, h).unwrap(), topk.pages());
        }
        assert_eq!(
            table.resident_pages(r, HeadId::new(0, 0)).unwrap().len(),
            pages as usize
        );
        table.check_invariants().unwrap();
    }

    #[test]
    fn log_csv_header() {
        let log = TransferLog::default();
        assert_eq!(
            log.to_csv(),
            "direction,bytes,issue_s,completion_s,request,priority\n"
        );
    }
}
