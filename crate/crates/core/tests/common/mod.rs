#![allow(dead_code)]

use std::collections::HashMap;

use flexicache::blocktable::{BlockId, BlockTable};
use flexicache::stability::HeadProfile;
use flexicache::{Config, HeadId, Request, RequestId};

/// 4 layers of 8 KV heads, two unstable heads per layer.
pub fn small_model() -> (Config, HeadProfile) {
    let cfg = Config {
        num_layers: 4,
        kv_heads_per_layer: 8,
        ..Config::default()
    };
    let unstable = (0..4).flat_map(|l| [HeadId::new(l, 0), HeadId::new(l, 5)]);
    let profile = HeadProfile::from_unstable("toy", 4, 8, unstable).unwrap();
    (cfg, profile)
}

/// Fast tier sized to hold exactly `n` copies of `r` fully resident.
pub fn cap_for_dense(cfg: &Config, r: &Request, n: u64) -> u64 {
    n * cfg.total_heads() as u64 * r.final_pages(cfg) * cfg.page_bytes()
}

/// Mapping of every head with physical ids renamed in first-seen order.
/// Equal canonical forms mean equal tables up to block renaming.
pub fn canonical(
    table: &BlockTable,
    layers: u16,
    heads: u16,
) -> Vec<(RequestId, HeadId, Vec<u32>)> {
    let mut reqs: Vec<RequestId> = table.requests().collect();
    reqs.sort();
    let mut names: HashMap<BlockId, u32> = HashMap::new();
    let mut out = Vec::new();
    for r in reqs {
        for h in HeadId::all(layers, heads) {
            let row = table
                .mapping(r, h)
                .unwrap()
                .iter()
                .map(|b| {
                    if b.is_null() {
                        0
                    } else {
                        let next = names.len() as u32 + 1;
                        *names.entry(*b).or_insert(next)
                    }
                })
                .collect();
            out.push((r, h, row));
        }
    }
    out
}

pub mod fuzz {
    use std::collections::BTreeMap;

    use flexicache::blocktable::{BlockTable, BlockTableError};
    use flexicache::scoring::TopKSet;
    use flexicache::synth::stream_rng;
    use flexicache::{HeadId, RequestId};
    use rand::seq::index::sample;
    use rand::Rng;

    const LAYERS: u16 = 2;
    const HEADS: u16 = 2;
    const MAX_REQS: usize = 6;
    const MAX_PAGES: u32 = 48;

    #[derive(Debug, Default)]
    pub struct Stats {
        pub ops: u64,
        pub ooms: u64,
        pub recycles: u64,
        pub flushes: u64,
        pub null_reads: u64,
    }

    fn err(op: u64, msg: impl std::fmt::Display) -> String {
        format!("op {op}: {msg}")
    }

    /// Random allocate/evict/recycle/flush sequence checked against a model
    /// of per-head residency.
    pub fn run(ops: u64, seed: u64) -> Result<Stats, String> {
        let mut rng = stream_rng(seed, &[0xf022]);
        let mut t = BlockTable::new(LAYERS, HEADS, 160);
        let mut model: BTreeMap<(RequestId, HeadId), Vec<bool>> = BTreeMap::new();
        let mut live: Vec<RequestId> = Vec::new();
        let mut next_id = 0u64;
        let mut stats = Stats::default();
        let heads: Vec<HeadId> = HeadId::all(LAYERS, HEADS).collect();

        for op in 0..ops {
            stats.ops += 1;
            let roll = rng.random_range(0..100);
            if live.is_empty() || (roll < 3 && live.len() < MAX_REQS) {
                let id = RequestId(next_id);
                next_id += 1;
                t.add_request(id).map_err(|e| err(op, e))?;
                for &h in &heads {
                    model.insert((id, h), Vec::new());
                }
                live.push(id);
                continue;
            }
            let req = live[rng.random_range(0..live.len())];
            let head = heads[rng.random_range(0..heads.len())];
            let key = (req, head);
            match roll {
                0..=4 => {
                    t.remove_request(req).map_err(|e| err(op, e))?;
                    live.retain(|&r| r != req);
                    model.retain(|(r, _), _| *r != req);
                }
                5..=44 => {
                    if model[&key].len() as u32 >= MAX_PAGES {
                        continue;
                    }
                    let free = t.pool().free_blocks();
                    match t.allocate_page(req, head) {
                        Ok(n) => {
                            let m = model.get_mut(&key).unwrap();
                            if n as usize != m.len() {
                                return Err(err(op, "allocation skipped a logical index"));
                            }
                            m.push(true);
                        }
                        Err(BlockTableError::OutOfMemory { .. }) if free == 0 => stats.ooms += 1,
                        Err(e) => return Err(err(op, e)),
                    }
                }
                45..=49 => {
                    if model[&key].len() as u32 >= MAX_PAGES {
                        continue;
                    }
                    t.append_null(req, head).map_err(|e| err(op, e))?;
                    model.get_mut(&key).unwrap().push(false);
                }
                50..=69 => {
                    let m = model.get_mut(&key).unwrap();
                    if m.is_empty() {
                        continue;
                    }
                    let p = rng.random_range(0..m.len());
                    let free = t.pool().free_blocks();
                    let r = t.evict_to_null(req, head, p as u32);
                    match (m[p], r) {
                        (true, Ok(_)) => {
                            m[p] = false;
                            if t.pool().free_blocks() != free + 1 {
                                return Err(err(op, "eviction did not free exactly one block"));
                            }
                        }
                        (false, Err(BlockTableError::AlreadyNull { .. })) => {}
                        (was, r) => {
                            return Err(err(op, format!("evict of resident={was} gave {r:?}")))
                        }
                    }
                }
                70..=84 => {
                    let m = model.get_mut(&key).unwrap();
                    if m.is_empty() {
                        continue;
                    }
                    let old: Vec<u32> = (0..m.len() as u32).filter(|&p| m[p as usize]).collect();
                    let size = (old.len() + rng.random_range(0..5))
                        .saturating_sub(2)
                        .min(m.len());
                    let new: Vec<u32> = sample(&mut rng, m.len(), size)
                        .iter()
                        .map(|p| p as u32)
                        .collect();
                    let (old, new) = (TopKSet::from_pages(old, 0), TopKSet::from_pages(new, 1));
                    let live_before = t.pool().live_blocks();
                    let deficit = new
                        .difference(&old)
                        .len()
                        .saturating_sub(old.difference(&new).len())
                        as u32;
                    match t.recycle(req, head, &old, &new, |_| true) {
                        Ok(plan) => {
                            stats.recycles += 1;
                            let pairs = plan.evicted.len().min(plan.promoted.len());
                            if plan.reassigned.len() != pairs
                                || plan.copies.len() != plan.promoted.len()
                            {
                                return Err(err(op, "recycle plan cardinalities"));
                            }
                            let expect_live = live_before as i64 + plan.allocated.len() as i64
                                - plan.freed.len() as i64;
                            if t.pool().live_blocks() as i64 != expect_live {
                                return Err(err(op, "recycle broke conservation"));
                            }
                            for f in &plan.freed {
                                if plan.allocated.iter().any(|(_, a)| a == f) {
                                    return Err(err(op, "block both freed and allocated"));
                                }
                            }
                            for (p, slot) in m.iter_mut().enumerate() {
                                *slot = new.contains(p as u32);
                            }
                        }
                        Err(BlockTableError::OutOfMemory { .. })
                            if deficit > t.pool().free_blocks() =>
                        {
                            stats.ooms += 1;
                        }
                        Err(e) => return Err(err(op, e)),
                    }
                }
                85..=94 => {
                    let segs = t.flush_dirty();
                    stats.flushes += 1;
                    for w in segs.windows(2) {
                        if w[0].0 + w[0].1 >= w[1].0 {
                            return Err(err(
                                op,
                                format!("segments {:?} not maximal and ordered", w),
                            ));
                        }
                    }
                    if !t.shadow_matches() {
                        return Err(err(op, "shadow diverged after flush"));
                    }
                }
                _ => {
                    let m = &model[&key];
                    if let Some(p) = (0..m.len()).find(|&p| !m[p]) {
                        match t.read_block(req, head, p as u32) {
                            Err(BlockTableError::NullDereference { .. }) => stats.null_reads += 1,
                            r => return Err(err(op, format!("null page read gave {r:?}"))),
                        }
                    }
                }
            }
            if let Some(m) = model.get(&key) {
                let want: Vec<u32> = (0..m.len() as u32).filter(|&p| m[p as usize]).collect();
                if t.resident_pages(req, head).map_err(|e| err(op, e))? != want {
                    return Err(err(
                        op,
                        format!("{head} of request {req} diverged from the model"),
                    ));
                }
            }
            let p = t.pool();
            if p.free_blocks() + p.live_blocks() + 1 != p.total_blocks() {
                return Err(err(op, "conservation"));
            }
            if op % 1024 == 0 {
                t.check_invariants().map_err(|e| err(op, e))?;
            }
        }
        t.check_invariants()?;
        t.flush_dirty();
        if !t.shadow_matches() {
            return Err("shadow diverged after final flush".into());
        }
        Ok(stats)
    }

    /// Random small tables: recycle and naive evict-then-allocate must agree
    /// up to block renaming. Returns the number of instances with a
    /// non-trivial rerank.
    pub fn recycle_equivalence(instances: u64, seed: u64) -> Result<u64, String> {
        let mut rng = stream_rng(seed, &[0xe0e0]);
        let mut nontrivial = 0;
        for i in 0..instances {
            let mut t = BlockTable::new(1, 2, 128);
            let reqs = rng.random_range(1..=3u64);
            for r in 0..reqs {
                t.add_request(RequestId(r)).unwrap();
                for h in HeadId::all(1, 2) {
                    let pages = rng.random_range(1..=12u32);
                    for _ in 0..pages {
                        t.allocate_page(RequestId(r), h).unwrap();
                    }
                    for p in 0..pages {
                        if rng.random_bool(0.4) {
                            t.evict_to_null(RequestId(r), h, p).unwrap();
                        }
                    }
                }
            }
            let req = RequestId(rng.random_range(0..reqs));
            let head = HeadId::new(0, rng.random_range(0..2));
            let len = t.len(req, head).unwrap() as usize;
            let old = TopKSet::from_pages(t.resident_pages(req, head).unwrap(), 0);
            let size = rng.random_range(0..=len);
            let new = TopKSet::from_pages(sample(&mut rng, len, size).iter().map(|p| p as u32), 1);
            let mut a = t.clone();
            let mut b = t;
            let pa = a
                .recycle(req, head, &old, &new, |_| true)
                .map_err(|e| format!("instance {i}: {e}"))?;
            let pb = b
                .rerank_naive(req, head, &old, &new, |_| true)
                .map_err(|e| format!("instance {i}: {e}"))?;
            if !pa.is_empty() {
                nontrivial += 1;
            }
            if (&pa.evicted, &pa.promoted) != (&pb.evicted, &pb.promoted) {
                return Err(format!("instance {i}: plans disagree on evicted/promoted"));
            }
            if super::canonical(&a, 1, 2) != super::canonical(&b, 1, 2) {
                return Err(format!(
                    "instance {i}: tables differ after canonical renaming"
                ));
            }
            if a.pool().live_blocks() != b.pool().live_blocks() {
                return Err(format!("instance {i}: live block counts differ"));
            }
            a.check_invariants()?;
            b.check_invariants()?;
        }
        Ok(nontrivial)
    }
}
