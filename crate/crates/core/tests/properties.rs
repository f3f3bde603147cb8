mod common;

use std::collections::BTreeSet;

use flexicache::attention::{dense_decode, relative_l2, sparse_decode, AttentionState};
use flexicache::blocktable::BlockTable;
use flexicache::scoring::{score_page, select_topk, update_minmax, MinMaxMeta, TopKSet};
use flexicache::simulator::memory_savings;
use flexicache::stability::{
    classify_heads, cross_task_overlap, rco, temporal_stability, StabilityReport,
};
use flexicache::synth::{gen_synthetic_trace, KvSequence, SynthTraceSpec};
use flexicache::trace::TopKTrace;
use flexicache::{Config, HeadId, RequestId};
use proptest::prelude::*;
use proptest::sample::subsequence;

fn subset(pool: u32, k: usize) -> impl Strategy<Value = Vec<u32>> {
    subsequence((0..pool).collect::<Vec<_>>(), k).prop_shuffle()
}

fn vecf(len: usize, mag: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-mag..mag, len)
}

fn trace_cfg(layers: u16, heads: u16, k: u32, seed: u64) -> Config {
    Config {
        num_layers: layers,
        kv_heads_per_layer: heads,
        topk_pages: k,
        rng_seed: seed,
        ..Config::default()
    }
}

fn small_trace(seed: u64, steps: usize) -> TopKTrace {
    let cfg = trace_cfg(2, 4, 8, seed);
    let spec = SynthTraceSpec {
        sample_id: format!("s{seed}"),
        planted_unstable: [HeadId::new(0, 1), HeadId::new(1, 3)].into(),
        persistence: 0.8,
        steps,
        initial_pool: 16,
    };
    gen_synthetic_trace(&cfg, &spec).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rco_symmetric_and_bounded((a, b) in (subset(200, 20), subset(200, 20))) {
        let ab = rco(&a, &b, 20, 200).unwrap();
        prop_assert_eq!(ab, rco(&b, &a, 20, 200).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn rco_invariant_under_relabeling(
        (a, b) in (subset(100, 10), subset(100, 10)),
        perm in Just((0..100u32).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let map = |s: &[u32]| s.iter().map(|&p| perm[p as usize]).collect::<Vec<_>>();
        prop_assert_eq!(rco(&a, &b, 10, 100).unwrap(), rco(&map(&a), &map(&b), 10, 100).unwrap());
    }

    #[test]
    fn raising_one_pair_never_lowers_stability(seed in 0u64..1000, head in 0usize..8, t in 1usize..8) {
        let trace = small_trace(seed, 12);
        let h = HeadId::from_flat(head, 4);
        let before = temporal_stability(&trace, h, 2, 8).unwrap().value;
        // copy the window start's selection to start + t, lifting that pair to 1
        let mut raised = TopKTrace::new("raised", 2, 4, 8);
        for s in 0..trace.steps() {
            let sels: Vec<Vec<u32>> = HeadId::all(2, 4)
                .map(|g| {
                    let src = if g == h && s == 2 + t { 2 } else { s };
                    trace.selection(src, g).to_vec()
                })
                .collect();
            raised.push_step(trace.pool_at(s), &sels).unwrap();
        }
        let after = temporal_stability(&raised, h, 2, 8).unwrap().value;
        prop_assert!(after >= before - 1e-15, "{} -> {}", before, after);
    }

    #[test]
    fn generated_traces_are_valid(
        layers in 1u16..4,
        heads in 1u16..5,
        k in 1u32..12,
        extra in 0u32..20,
        steps in 1usize..40,
        persistence in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let cfg = trace_cfg(layers, heads, k, seed);
        let spec = SynthTraceSpec {
            sample_id: "p".into(),
            planted_unstable: [HeadId::new(0, 0)].into(),
            persistence,
            steps,
            initial_pool: k + extra,
        };
        let trace = gen_synthetic_trace(&cfg, &spec).unwrap();
        prop_assert_eq!(trace.steps(), steps);
        prop_assert!(trace.pools().windows(2).all(|w| w[0] <= w[1]));
        let mut bytes = Vec::new();
        trace.write_to(&mut bytes).unwrap();
        // reading back re-validates every step
        prop_assert_eq!(&TopKTrace::read_from(&bytes[..], "p").unwrap(), &trace);
        for s in 0..steps {
            for h in HeadId::all(layers, heads) {
                let sel = trace.selection(s, h);
                prop_assert_eq!(sel.len(), (k as usize).min(trace.pool_at(s) as usize));
                prop_assert!(sel.iter().all(|&p| p < trace.pool_at(s)));
                prop_assert_eq!(sel.iter().collect::<BTreeSet<_>>().len(), sel.len());
            }
        }
        prop_assert_eq!(gen_synthetic_trace(&cfg, &spec).unwrap(), trace);
    }

    #[test]
    fn classification_ignores_report_order(seeds in prop::collection::vec(0u64..50, 2..5), rot in 0usize..5) {
        let reports: Vec<StabilityReport> = seeds
            .iter()
            .map(|&s| StabilityReport::compute(&small_trace(s, 24), 8, 4, 0.25).unwrap())
            .collect();
        let mut rotated = reports.clone();
        rotated.rotate_left(rot % reports.len());
        let a = classify_heads(&reports, 0.25, "m", "t").unwrap();
        let b = classify_heads(&rotated, 0.25, "m", "t").unwrap();
        prop_assert_eq!(a.unstable(), b.unstable());
        prop_assert_eq!(a.unstable().len(), 2);
        let m = cross_task_overlap(&[a.clone(), a]).unwrap();
        prop_assert_eq!(m.values[0][0], 1.0);
        prop_assert_eq!(m.values[1][1], 1.0);
    }

    #[test]
    fn minmax_is_order_independent(
        keys in prop::collection::vec(vecf(6, 5.0), 1..16),
        order in Just((0..16usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let build = |idx: &mut dyn Iterator<Item = usize>| {
            let mut m = MinMaxMeta::new(6, 16);
            let p = m.append_page();
            for i in idx {
                update_minmax(&mut m, p, &keys[i]).unwrap();
            }
            m
        };
        let a = build(&mut (0..keys.len()));
        let b = build(&mut order.iter().copied().filter(|&i| i < keys.len()));
        prop_assert_eq!(a.bounds(0).unwrap(), b.bounds(0).unwrap());
        let (lo, hi) = a.bounds(0).unwrap();
        prop_assert!(lo.iter().zip(hi).all(|(l, h)| l <= h));
    }

    #[test]
    fn page_score_bounds_every_key(keys in prop::collection::vec(vecf(8, 3.0), 1..16), q in vecf(8, 3.0)) {
        let mut m = MinMaxMeta::new(8, 16);
        let p = m.append_page();
        for k in &keys {
            m.update(p, k).unwrap();
        }
        let s = score_page(&q, &m, p).unwrap();
        for k in &keys {
            prop_assert!(s >= q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() - 1e-12);
        }
    }

    #[test]
    fn topk_size_and_pin(scores in prop::collection::vec(-1e3f64..1e3, 1..200), k in 1usize..80) {
        let last = scores.len() as u32 - 1;
        let t = select_topk(&scores, k, &[last], 0);
        prop_assert_eq!(t.len(), k.min(scores.len()));
        prop_assert!(t.contains(last));
        // every unselected page scores no higher than every selected unpinned one
        let floor = t.pages().iter().filter(|&&p| p != last).map(|&p| scores[p as usize]).fold(f64::INFINITY, f64::min);
        for p in 0..scores.len() as u32 {
            if !t.contains(p) {
                prop_assert!(scores[p as usize] <= floor);
            }
        }
        let full = select_topk(&scores, scores.len() + k, &[last], 0);
        let every: Vec<u32> = (0..=last).collect();
        prop_assert_eq!(full.pages(), &every[..]);
    }

    #[test]
    fn sparse_output_ignores_page_placement(
        pages in 2usize..12,
        tail in 1usize..=16,
        seed in any::<u64>(),
        perm in Just((0..11usize).collect::<Vec<_>>()).prop_shuffle(),
        pick in prop::collection::vec(any::<bool>(), 12),
    ) {
        let seq = flexicache::synth::gen_synthetic_kv(&trace_cfg(1, 1, 8, seed), (pages - 1) * 16 + tail, seed)
            .unwrap()
            .swap_remove(0);
        let dim = seq.dim;
        // permute the full pages, keep the partial page last
        let perm: Vec<usize> = perm.into_iter().filter(|&p| p < pages - 1).collect();
        let mut moved = KvSequence::new(dim);
        let mut slot = vec![0; pages];
        for (to, &from) in perm.iter().enumerate() {
            slot[from] = to;
            for t in from * 16..(from + 1) * 16 {
                moved.push(seq.key(t), seq.value(t));
            }
        }
        slot[pages - 1] = pages - 1;
        for t in (pages - 1) * 16..seq.len() {
            moved.push(seq.key(t), seq.value(t));
        }
        let chosen: Vec<u32> = (0..pages as u32).filter(|&p| pick[p as usize] || p as usize == pages - 1).collect();
        let q: Vec<f64> = seq.key(0).iter().map(|x| x * 0.5).collect();
        let a = sparse_decode(&q, &AttentionState::new(16, vec![seq]), 0, &TopKSet::from_pages(chosen.clone(), 0)).unwrap();
        let mapped = TopKSet::from_pages(chosen.iter().map(|&p| slot[p as usize] as u32), 0);
        let state = AttentionState::new(16, vec![moved]);
        let b = sparse_decode(&q, &state, 0, &mapped).unwrap();
        prop_assert!(relative_l2(&b, &a) < 1e-12);
        let all = TopKSet::from_pages(0..pages as u32, 0);
        prop_assert!(relative_l2(&sparse_decode(&q, &state, 0, &all).unwrap(), &dense_decode(&q, &state, 0).unwrap()) < 1e-12);
    }

    #[test]
    fn softmax_finite_for_large_keys(tokens in 1usize..64, mag in 1.0f64..=1e3, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = flexicache::synth::stream_rng(seed, &[]);
        let mut seq = KvSequence::new(8);
        for _ in 0..tokens {
            let k: Vec<f64> = (0..8).map(|_| rng.random_range(-mag..=mag)).collect();
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..=1.0)).collect();
            seq.push(&k, &v);
        }
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(-mag..=mag)).collect();
        let out = dense_decode(&q, &AttentionState::new(16, vec![seq]), 0).unwrap();
        prop_assert!(out.iter().all(|x| x.is_finite() && x.abs() <= 1.0 + 1e-9));
    }

    #[test]
    fn savings_monotone(a in 0u64..300_000, b in 0u64..300_000, k in 1u32..200, u in 0.0f64..1.0) {
        let cfg = Config { topk_pages: k, unstable_fraction: u, ..Config::default() };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(memory_savings(lo, &cfg) <= memory_savings(hi, &cfg));
    }

    #[test]
    fn shadow_converges_after_flush(ops in prop::collection::vec((0u8..4, 0u16..4, 0u32..40), 1..300)) {
        let mut t = BlockTable::new(2, 2, 64);
        let r = RequestId(1);
        t.add_request(r).unwrap();
        for (op, head, page) in ops {
            let h = HeadId::from_flat(head as usize, 2);
            match op {
                0 | 1 => {
                    let _ = t.allocate_page(r, h);
                }
                2 => {
                    t.append_null(r, h).unwrap();
                }
                _ => {
                    let len = t.len(r, h).unwrap();
                    if len > 0 {
                        let _ = t.evict_to_null(r, h, page % len);
                    }
                }
            }
            let p = t.pool();
            prop_assert_eq!(p.free_blocks() + p.live_blocks() + 1, p.total_blocks());
        }
        t.check_invariants().unwrap();
        t.flush_dirty();
        prop_assert!(t.shadow_matches());
        prop_assert!(t.flush_dirty().is_empty());
    }
}

#[test]
fn block_table_fuzz_smoke() {
    let stats = common::fuzz::run(50_000, 77).unwrap();
    assert!(stats.recycles > 0 && stats.flushes > 0);
    assert!(common::fuzz::recycle_equivalence(200, 77).unwrap() > 100);
}
