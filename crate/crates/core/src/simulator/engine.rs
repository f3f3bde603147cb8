use std::collections::VecDeque;

use log::{debug, trace};

use super::report::{RequestMetrics, SimReport};
use super::selector::{DriftSelector, Selector};
use super::workload::poisson_arrivals;
use super::{CostModel, Policy, SimError};
use crate::blocktable::{BlockTable, BlockTableError};
use crate::config::Config;
use crate::scoring::{layer_scoring_skipped, rerank_due, TopKSet, PAGES_PER_META_BLOCK};
use crate::stability::HeadProfile;
use crate::tiering::{release_non_topk, Direction, Link, TierStore, TransferEvent};
use crate::types::{HeadId, Request, RequestId};

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub policy: Policy,
    /// Per-step probability that a stable head keeps a selected page.
    pub persistence: f64,
    /// Residency, offload-once and no-data-loss checks while running.
    pub check_invariants: bool,
    /// Full block-table consistency check every this many ticks; 0 checks
    /// only at the end.
    pub full_check_every: u64,
    pub record_transfers: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            policy: Policy::FlexiCache,
            persistence: 0.98,
            check_invariants: true,
            full_check_every: 0,
            record_transfers: false,
        }
    }
}

impl SimOptions {
    pub fn with_policy(policy: Policy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }
}

/// All requests arrive at time zero.
pub fn run_offline(
    requests: &[Request],
    cfg: &Config,
    profile: &HeadProfile,
    opts: &SimOptions,
) -> Result<SimReport, SimError> {
    let reqs = requests
        .iter()
        .cloned()
        .map(|r| r.arriving_at(0.0))
        .collect();
    let mut sel = DriftSelector::new(cfg.topk_pages as usize, opts.persistence, cfg.rng_seed);
    run(reqs, cfg, profile, opts, &mut sel, "offline")
}

/// Requests arrive in order as a Poisson process of `rate` per second.
pub fn run_online(
    requests: &[Request],
    rate: f64,
    cfg: &Config,
    profile: &HeadProfile,
    opts: &SimOptions,
) -> Result<SimReport, SimError> {
    let reqs = poisson_arrivals(requests.to_vec(), rate, cfg.rng_seed)?;
    let mut sel = DriftSelector::new(cfg.topk_pages as usize, opts.persistence, cfg.rng_seed);
    run(reqs, cfg, profile, opts, &mut sel, "online")
}

/// Simulate `requests` (served FCFS by arrival time) to completion.
pub fn run(
    mut requests: Vec<Request>,
    cfg: &Config,
    profile: &HeadProfile,
    opts: &SimOptions,
    selector: &mut dyn Selector,
    mode: &'static str,
) -> Result<SimReport, SimError> {
    if profile.layers() != cfg.num_layers || profile.heads_per_layer() != cfg.kv_heads_per_layer {
        return Err(SimError::ProfileMismatch(
            profile.layers(),
            profile.heads_per_layer(),
            cfg.num_layers,
            cfg.kv_heads_per_layer,
        ));
    }
    requests.sort_by(|a, b| {
        a.arrival_time_s
            .total_cmp(&b.arrival_time_s)
            .then(a.id.cmp(&b.id))
    });
    let mut engine = Engine::new(cfg, profile, opts, selector, mode);
    for r in &requests {
        let need = engine.initial_reservation(r);
        if need > cfg.fast_tier_capacity_bytes {
            return Err(SimError::Infeasible {
                req: r.id,
                needed: need,
                capacity: cfg.fast_tier_capacity_bytes,
            });
        }
    }
    let expected = requests.len();
    engine.queue = requests.into();
    engine.run()?;
    let report = engine.report;
    if report.requests.len() != expected {
        return Err(SimError::Invariant(format!(
            "{} of {expected} requests finished",
            report.requests.len()
        )));
    }
    Ok(report)
}

#[derive(Debug)]
struct StableHead {
    topk: TopKSet,
    /// Pages at or beyond this index were appended after the last selection
    /// and are resident regardless of `topk`.
    appended_from: u32,
}

#[derive(Debug)]
struct Active {
    req: Request,
    admitted_s: f64,
    first_token_s: f64,
    tokens: u64,
    generated: u32,
    decode_steps: u64,
    last_rerank: u64,
    reserved: u64,
    offload_done: bool,
    paused_until: f64,
    /// Issue and completion of the latest reload.
    reload: (f64, f64),
    stable: Vec<StableHead>,
}

struct Engine<'a> {
    cfg: &'a Config,
    profile: &'a HeadProfile,
    opts: &'a SimOptions,
    cost: CostModel,
    selector: &'a mut dyn Selector,
    flex: bool,
    table: BlockTable,
    store: TierStore,
    link: Link,
    all_heads: Vec<HeadId>,
    stable_heads: Vec<HeadId>,
    queue: VecDeque<Request>,
    active: Vec<Active>,
    reserved_total: u64,
    offloads: Vec<(f64, RequestId)>,
    now: f64,
    first_arrival: Option<f64>,
    paused_time: f64,
    decode_time: f64,
    report: SimReport,
}

impl<'a> Engine<'a> {
    fn new(
        cfg: &'a Config,
        profile: &'a HeadProfile,
        opts: &'a SimOptions,
        selector: &'a mut dyn Selector,
        mode: &'static str,
    ) -> Self {
        let blocks =
            (cfg.fast_tier_capacity_bytes / cfg.page_bytes()).min(u32::MAX as u64 - 1) as u32 + 1;
        Self {
            cfg,
            profile,
            opts,
            cost: CostModel::from_config(cfg),
            selector,
            flex: opts.policy == Policy::FlexiCache,
            table: BlockTable::new(cfg.num_layers, cfg.kv_heads_per_layer, blocks),
            store: TierStore::new(cfg, profile),
            link: Link::new(),
            all_heads: HeadId::all(cfg.num_layers, cfg.kv_heads_per_layer).collect(),
            stable_heads: profile.stable().collect(),
            queue: VecDeque::new(),
            active: Vec::new(),
            reserved_total: 0,
            offloads: Vec::new(),
            now: 0.0,
            first_arrival: None,
            paused_time: 0.0,
            decode_time: 0.0,
            report: SimReport {
                policy: Some(opts.policy),
                mode,
                ..SimReport::default()
            },
        }
    }

    fn n_heads(&self) -> u64 {
        self.all_heads.len() as u64
    }

    fn meta_bytes_for(&self, pages: u64) -> u64 {
        if !self.flex {
            return 0;
        }
        let blocks = pages.div_ceil(PAGES_PER_META_BLOCK as u64);
        self.n_heads() * blocks * PAGES_PER_META_BLOCK as u64 * self.cfg.minmax_page_bytes()
    }

    /// Peak KV of every head fully resident, plus metadata.
    fn initial_reservation(&self, r: &Request) -> u64 {
        let fin = r.final_pages(self.cfg);
        self.n_heads() * fin * self.cfg.page_bytes() + self.meta_bytes_for(fin)
    }

    /// Bound once stable heads hold only top-K plus pages appended since the
    /// last selection; `extra` covers appends beyond one rerank period.
    fn steady_reservation(&self, r: &Request, extra: u64) -> u64 {
        let fin = r.final_pages(self.cfg);
        let slack = (self.cfg.rerank_period as u64).div_ceil(self.cfg.page_size_tokens as u64) + 1;
        let stable = self.stable_heads.len() as u64;
        let unstable = self.n_heads() - stable;
        let per_stable = fin.min(self.cfg.topk_pages as u64 + slack + extra);
        (unstable * fin + stable * per_stable) * self.cfg.page_bytes() + self.meta_bytes_for(fin)
    }

    fn set_reservation(&mut self, idx: usize, bytes: u64) {
        let a = &mut self.active[idx];
        self.reserved_total = self.reserved_total - a.reserved + bytes;
        a.reserved = bytes;
    }

    fn log(&mut self, e: TransferEvent) {
        match e.direction {
            Direction::Offload => self.report.offload_bytes += e.bytes,
            Direction::Reload => self.report.reload_bytes += e.bytes,
        }
        if self.opts.record_transfers {
            self.report.transfers.push(e);
        }
    }

    fn invariant(&self, msg: String) -> SimError {
        SimError::Invariant(format!("t={:.6}: {msg}", self.now))
    }

    fn table_err(&self, e: BlockTableError) -> SimError {
        match e {
            BlockTableError::OutOfMemory { .. } => {
                self.invariant(format!("fast tier exhausted under reservations: {e}"))
            }
            e => SimError::Table(e),
        }
    }

    fn run(&mut self) -> Result<(), SimError> {
        self.first_arrival = self.queue.front().map(|r| r.arrival_time_s);
        loop {
            self.process_offloads()?;
            let admitted = self.admit();
            if !admitted.is_empty() {
                self.prefill(admitted)?;
                continue;
            }
            if self.active.is_empty() {
                match self.queue.front() {
                    Some(r) if r.arrival_time_s > self.now => {
                        self.now = r.arrival_time_s;
                        continue;
                    }
                    Some(r) => {
                        return Err(self.invariant(format!(
                            "request {} cannot be admitted on an idle system",
                            r.id
                        )))
                    }
                    None => break,
                }
            }
            self.decode_tick()?;
        }
        let start = self.first_arrival.unwrap_or(0.0);
        self.report.makespan_s = self.now - start;
        self.report.pause_fraction = if self.decode_time > 0.0 {
            self.paused_time / self.decode_time
        } else {
            0.0
        };
        if self.opts.check_invariants {
            self.full_check()?;
            if self.table.pool().live_blocks() != 0 {
                return Err(self.invariant("blocks leaked after all requests finished".into()));
            }
        }
        Ok(())
    }

    fn full_check(&self) -> Result<(), SimError> {
        self.table
            .check_invariants()
            .map_err(|m| self.invariant(m))?;
        self.store.check().map_err(|m| self.invariant(m))
    }

    fn admit(&mut self) -> Vec<Request> {
        let mut out = Vec::new();
        while let Some(r) = self.queue.front() {
            if r.arrival_time_s > self.now {
                break;
            }
            let need = self.initial_reservation(r);
            if self.reserved_total + need > self.cfg.fast_tier_capacity_bytes {
                break;
            }
            self.reserved_total += need;
            out.push(self.queue.pop_front().expect("front exists"));
        }
        out
    }

    fn position(&self, id: RequestId) -> Option<usize> {
        self.active.iter().position(|a| a.req.id == id)
    }

    fn pinned(&self, tokens: u64) -> Option<u32> {
        let p = self.cfg.page_size_tokens as u64;
        (!tokens.is_multiple_of(p)).then(|| (tokens / p) as u32)
    }

    fn prefill(&mut self, admitted: Vec<Request>) -> Result<(), SimError> {
        let prompt_sum: u64 = admitted.iter().map(|r| r.prompt_tokens as u64).sum();
        let start = self.now;
        let end = start + self.cost.prefill_step(prompt_sum);
        debug!(
            "t={start:.4} prefill {} requests, {prompt_sum} tokens",
            admitted.len()
        );
        let mut done = Vec::new();
        for req in admitted {
            let need = self.initial_reservation(&req);
            self.table.add_request(req.id)?;
            let pages = req.prompt_pages(self.cfg);
            for i in 0..self.all_heads.len() {
                let head = self.all_heads[i];
                for _ in 0..pages {
                    self.table
                        .allocate_page(req.id, head)
                        .map_err(|e| self.table_err(e))?;
                }
            }
            let tokens = req.prompt_tokens as u64;
            let mut stable = Vec::with_capacity(self.stable_heads.len());
            if self.flex {
                let e = self.store.offload_after_prefill(
                    req.id,
                    tokens,
                    end,
                    &mut self.link,
                    self.cfg,
                )?;
                self.offloads.push((e.completion_time_s, req.id));
                self.log(e);
                let pinned = self.pinned(tokens);
                for &head in &self.stable_heads {
                    let topk = self
                        .selector
                        .select(req.id, head, pages as u32, pinned, None, 0, 0);
                    stable.push(StableHead {
                        topk,
                        appended_from: pages as u32,
                    });
                }
            }
            let single = req.max_output_tokens == 1;
            let id = req.id;
            self.active.push(Active {
                req,
                admitted_s: start,
                first_token_s: end,
                tokens,
                generated: 1,
                decode_steps: 0,
                last_rerank: 0,
                reserved: need,
                offload_done: false,
                paused_until: 0.0,
                reload: (0.0, 0.0),
                stable,
            });
            if single {
                done.push(id);
            }
        }
        self.finish_tick(end, &done)
    }

    fn process_offloads(&mut self) -> Result<(), SimError> {
        self.offloads
            .sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let ready = self.offloads.partition_point(|(t, _)| *t <= self.now);
        let landed: Vec<(f64, RequestId)> = self.offloads.drain(..ready).collect();
        for (t, id) in landed {
            let Some(idx) = self.position(id) else {
                continue;
            };
            trace!("t={t:.6} prefill offload of request {id} landed");
            let len = self.table.len(id, HeadId::new(0, 0))?;
            for i in 0..self.stable_heads.len() {
                let head = self.stable_heads[i];
                let st = &self.active[idx].stable[i];
                release_non_topk(
                    &mut self.table,
                    &self.store,
                    id,
                    head,
                    &st.topk,
                    st.appended_from,
                )?;
                if self.opts.check_invariants {
                    let expect: Vec<u32> = st
                        .topk
                        .pages()
                        .iter()
                        .copied()
                        .chain(st.appended_from..len)
                        .collect();
                    let resident = self.table.resident_pages(id, head)?;
                    if resident != expect {
                        return Err(self.invariant(format!(
                            "request {id} {head}: residency after offload differs from top-K"
                        )));
                    }
                }
            }
            let appended = self.active[idx]
                .stable
                .first()
                .map_or(0, |s| len - s.appended_from) as u64;
            let steady = self.steady_reservation(&self.active[idx].req, appended);
            self.set_reservation(idx, steady);
            self.active[idx].offload_done = true;
        }
        Ok(())
    }

    fn rerank(&mut self, idx: usize) -> Result<(), SimError> {
        let id = self.active[idx].req.id;
        let tokens = self.active[idx].tokens;
        let step = self.active[idx].decode_steps;
        let pages = self.cfg.pages_for(tokens) as u32;
        let pinned = self.pinned(tokens);
        let mut promoted_all = Vec::new();
        let mut not_before = self.now;
        for i in 0..self.stable_heads.len() {
            let head = self.stable_heads[i];
            let st = &self.active[idx].stable[i];
            let old = TopKSet::from_pages(
                st.topk
                    .pages()
                    .iter()
                    .copied()
                    .chain(st.appended_from..pages),
                st.topk.epoch,
            );
            if self.opts.check_invariants && self.table.resident_pages(id, head)? != old.pages() {
                return Err(self.invariant(format!(
                    "request {id} {head}: residency before rerank differs from top-K"
                )));
            }
            let since = step - st.topk.epoch;
            let new = self
                .selector
                .select(id, head, pages, pinned, Some(&st.topk), since, step);
            let store = &self.store;
            let plan = self
                .table
                .recycle(id, head, &old, &new, |p| store.has_copy(id, head, p))
                .map_err(|e| self.table_err(e))?;
            for &p in &plan.evicted {
                let t = self.store.ready_at(id, head, p).ok_or_else(|| {
                    self.invariant(format!(
                        "request {id} {head}: evicted page {p} has no slow-tier copy"
                    ))
                })?;
                not_before = not_before.max(t);
            }
            if self.opts.check_invariants && self.table.resident_pages(id, head)? != new.pages() {
                return Err(self.invariant(format!(
                    "request {id} {head}: residency after rerank differs from top-K"
                )));
            }
            self.report.promoted_pages += plan.promoted.len() as u64;
            self.report.reranked_pages += new.len() as u64;
            if !plan.promoted.is_empty() {
                promoted_all.push((head, plan.promoted));
            }
            let st = &mut self.active[idx].stable[i];
            st.topk = new;
            st.appended_from = pages;
        }
        self.report.reranks += 1;
        let steady = self.steady_reservation(&self.active[idx].req, 0);
        self.set_reservation(idx, steady);
        if !promoted_all.is_empty() {
            let e = self
                .store
                .reload(id, &promoted_all, not_before, &mut self.link, self.cfg)?;
            self.active[idx].paused_until = e.completion_time_s;
            self.active[idx].reload = (self.now, e.completion_time_s);
            self.report.reloads += 1;
            self.log(e);
        }
        Ok(())
    }

    fn decode_tick(&mut self) -> Result<(), SimError> {
        let period = self.cfg.rerank_period as u64;
        if self.flex {
            for idx in 0..self.active.len() {
                let a = &self.active[idx];
                let due = a.decode_steps > 0
                    && a.decode_steps.is_multiple_of(period)
                    && a.last_rerank != a.decode_steps;
                if a.paused_until > self.now || !due {
                    continue;
                }
                self.active[idx].last_rerank = a.decode_steps;
                if self.active[idx].offload_done {
                    self.rerank(idx)?;
                } else {
                    self.report.deferred_reranks += 1;
                }
            }
        }
        let running: Vec<usize> = (0..self.active.len())
            .filter(|&i| self.active[i].paused_until <= self.now)
            .collect();
        let paused = self.active.len() - running.len();
        let outside_reload = self
            .active
            .iter()
            .filter(|a| {
                a.paused_until > self.now && !(a.reload.0 <= self.now && self.now < a.reload.1)
            })
            .count();
        self.report.pause_violations += outside_reload as u64;
        if running.is_empty() {
            // everyone waits on a reload: skip to the first event
            let mut next = self
                .active
                .iter()
                .map(|a| a.paused_until)
                .fold(f64::INFINITY, f64::min);
            if let Some(r) = self.queue.front() {
                next = next.min(r.arrival_time_s.max(self.now));
            }
            if let Some(&(t, _)) = self.offloads.iter().min_by(|a, b| a.0.total_cmp(&b.0)) {
                next = next.min(t.max(self.now));
            }
            let gap = next - self.now;
            self.paused_time += gap;
            self.decode_time += gap;
            self.now = next;
            return Ok(());
        }

        let pb = self.cfg.page_bytes();
        let mm = self.cfg.minmax_page_bytes();
        let k = self.cfg.topk_pages as u64;
        let mut touched = 0u64;
        for &i in &running {
            let a = &self.active[i];
            let pages = self.cfg.pages_for(a.tokens);
            self.report.naive_score_evaluations += self.n_heads() * pages;
            if !self.flex {
                touched += self.n_heads() * pages * pb;
                continue;
            }
            let s = a.decode_steps;
            let due = self
                .all_heads
                .iter()
                .filter(|&&h| rerank_due(h, s, self.profile, self.cfg.rerank_period))
                .count() as u64;
            self.report.score_evaluations += due * pages;
            self.report.skipped_layer_scorings += (0..self.cfg.num_layers)
                .filter(|&l| layer_scoring_skipped(l, s, self.profile, self.cfg.rerank_period))
                .count() as u64;
            let unstable = self.n_heads() - self.stable_heads.len() as u64;
            let stable_pages: u64 = a
                .stable
                .iter()
                .map(|st| st.topk.len() as u64 + (pages - st.appended_from as u64))
                .sum();
            touched += (unstable * pages.min(k) + stable_pages) * pb + due * pages * mm;
        }
        let dur = self.cost.decode_step(touched);
        let end = self.now + dur;
        self.paused_time += dur * paused as f64 / self.active.len() as f64;
        self.decode_time += dur;

        let p = self.cfg.page_size_tokens as u64;
        let mut done = Vec::new();
        for &i in &running {
            let id = self.active[i].req.id;
            let t = self.active[i].tokens;
            if t.is_multiple_of(p) {
                for h in 0..self.all_heads.len() {
                    let head = self.all_heads[h];
                    self.table
                        .allocate_page(id, head)
                        .map_err(|e| self.table_err(e))?;
                }
            }
            let a = &mut self.active[i];
            a.tokens += 1;
            a.generated += 1;
            a.decode_steps += 1;
            let filled = a.tokens.is_multiple_of(p);
            let tokens = a.tokens;
            if a.generated == a.req.max_output_tokens {
                done.push(id);
            }
            if self.flex && filled {
                let page = (tokens / p - 1) as u32;
                let e = self.store.incremental_offload(
                    id,
                    &self.stable_heads,
                    page,
                    p as u32,
                    end,
                    &mut self.link,
                    self.cfg,
                )?;
                self.log(e);
            }
        }
        self.finish_tick(end, &done)
    }

    fn finish_tick(&mut self, end: f64, done: &[RequestId]) -> Result<(), SimError> {
        if end < self.now {
            return Err(self.invariant(format!("time ran backwards to {end}")));
        }
        self.now = end;
        self.report.ticks += 1;
        self.report.peak_concurrency = self.report.peak_concurrency.max(self.active.len());
        let meta: u64 = self
            .active
            .iter()
            .map(|a| self.meta_bytes_for(self.cfg.pages_for(a.tokens)))
            .sum();
        let live = self.table.pool().live_blocks();
        self.report.peak_kv_blocks = self.report.peak_kv_blocks.max(live);
        self.report.peak_fast_bytes = self
            .report
            .peak_fast_bytes
            .max(live as u64 * self.cfg.page_bytes() + meta);
        for &id in done {
            self.finish(id)?;
        }
        let segments = self.table.flush_dirty();
        self.report.table_sync_bytes +=
            segments.iter().map(|(_, len)| *len as u64 * 4).sum::<u64>();
        if self.opts.check_invariants
            && self.opts.full_check_every > 0
            && self.report.ticks.is_multiple_of(self.opts.full_check_every)
        {
            self.full_check()?;
            if !self.table.shadow_matches() {
                return Err(self.invariant("shadow table diverged after flush".into()));
            }
        }
        Ok(())
    }

    fn finish(&mut self, id: RequestId) -> Result<(), SimError> {
        let idx = self
            .position(id)
            .ok_or_else(|| self.invariant(format!("finishing unknown request {id}")))?;
        let a = &self.active[idx];
        if self.flex && self.opts.check_invariants {
            let full = (a.tokens / self.cfg.page_size_tokens as u64) as u32;
            for &head in &self.stable_heads {
                if self.store.offloaded_pages(id, head) != full {
                    return Err(self.invariant(format!(
                        "request {id} {head}: {} pages offloaded, {full} full",
                        self.store.offloaded_pages(id, head)
                    )));
                }
                for page in 0..full {
                    let w = self.store.writes(id, head, page);
                    self.report.max_slow_writes = self.report.max_slow_writes.max(w);
                    if w != 1 {
                        return Err(self.invariant(format!(
                            "request {id} {head} page {page} written {w} times"
                        )));
                    }
                }
            }
        }
        let a = self.active.remove(idx);
        self.reserved_total -= a.reserved;
        self.table.remove_request(id)?;
        self.store.remove_request(id);
        self.selector.forget(id);
        self.offloads.retain(|(_, r)| *r != id);
        self.report.requests.push(RequestMetrics {
            id,
            prompt_tokens: a.req.prompt_tokens,
            output_tokens: a.generated,
            arrival_s: a.req.arrival_time_s,
            admitted_s: a.admitted_s,
            first_token_s: a.first_token_s,
            finish_s: self.now,
        });
        Ok(())
    }
}
