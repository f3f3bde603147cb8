use std::fmt::Write as _;

use super::Policy;
use crate::attention::percentile;
use crate::tiering::TransferLog;
use crate::types::RequestId;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LatencyStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            mean: s.iter().sum::<f64>() / s.len() as f64,
            p50: percentile(&s, 0.50),
            p95: percentile(&s, 0.95),
            p99: percentile(&s, 0.99),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestMetrics {
    pub id: RequestId,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    pub arrival_s: f64,
    pub admitted_s: f64,
    pub first_token_s: f64,
    pub finish_s: f64,
}

impl RequestMetrics {
    pub fn ttft(&self) -> f64 {
        self.first_token_s - self.arrival_s
    }

    /// Mean interval between output tokens; `None` for single-token outputs.
    pub fn tpot(&self) -> Option<f64> {
        (self.output_tokens > 1)
            .then(|| (self.finish_s - self.first_token_s) / (self.output_tokens - 1) as f64)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SimReport {
    pub policy: Option<Policy>,
    pub mode: &'static str,
    pub requests: Vec<RequestMetrics>,
    pub makespan_s: f64,
    pub ticks: u64,
    pub peak_fast_bytes: u64,
    pub peak_kv_blocks: u32,
    pub peak_concurrency: usize,
    pub offload_bytes: u64,
    pub reload_bytes: u64,
    pub table_sync_bytes: u64,
    /// Time-weighted share of running requests sitting out a decode step
    /// while their reload is in flight.
    pub pause_fraction: f64,
    /// Decode ticks in which a request sat out without its reload in flight.
    pub pause_violations: u64,
    pub reranks: u64,
    pub deferred_reranks: u64,
    pub reloads: u64,
    pub promoted_pages: u64,
    /// Stable-head pages selected at reranks, the denominator of the promoted share.
    pub reranked_pages: u64,
    pub score_evaluations: u64,
    pub naive_score_evaluations: u64,
    pub skipped_layer_scorings: u64,
    pub max_slow_writes: u8,
    pub transfers: TransferLog,
}

impl SimReport {
    pub fn output_tokens(&self) -> u64 {
        self.requests.iter().map(|r| r.output_tokens as u64).sum()
    }

    pub fn total_tokens(&self) -> u64 {
        self.requests
            .iter()
            .map(|r| r.prompt_tokens as u64 + r.output_tokens as u64)
            .sum()
    }

    /// Prompt plus output tokens per simulated second.
    pub fn throughput(&self) -> f64 {
        if self.makespan_s > 0.0 {
            self.total_tokens() as f64 / self.makespan_s
        } else {
            0.0
        }
    }

    pub fn ttft(&self) -> LatencyStats {
        LatencyStats::from_samples(
            &self
                .requests
                .iter()
                .map(RequestMetrics::ttft)
                .collect::<Vec<_>>(),
        )
    }

    pub fn tpot(&self) -> LatencyStats {
        LatencyStats::from_samples(
            &self
                .requests
                .iter()
                .filter_map(RequestMetrics::tpot)
                .collect::<Vec<_>>(),
        )
    }

    /// Share of reranked stable-head pages that had to be reloaded.
    pub fn promoted_fraction(&self) -> f64 {
        if self.reranked_pages == 0 {
            0.0
        } else {
            self.promoted_pages as f64 / self.reranked_pages as f64
        }
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let policy = self
            .policy
            .map_or_else(|| "-".to_string(), |p| p.to_string());
        let (ttft, tpot) = (self.ttft(), self.tpot());
        let mut out = String::from("# fxc simulation report\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("policy", policy);
        kv("mode", self.mode.to_string());
        kv("requests", self.requests.len().to_string());
        kv("total_tokens", self.total_tokens().to_string());
        kv("output_tokens", self.output_tokens().to_string());
        kv("makespan_s", format!("{:.6}", self.makespan_s));
        kv("throughput_tok_per_s", format!("{:.3}", self.throughput()));
        for (name, s) in [("ttft", ttft), ("tpot", tpot)] {
            kv(&format!("{name}_mean_s"), format!("{:.6}", s.mean));
            kv(&format!("{name}_p50_s"), format!("{:.6}", s.p50));
            kv(&format!("{name}_p95_s"), format!("{:.6}", s.p95));
            kv(&format!("{name}_p99_s"), format!("{:.6}", s.p99));
        }
        kv("peak_fast_bytes", self.peak_fast_bytes.to_string());
        kv("peak_kv_blocks", self.peak_kv_blocks.to_string());
        kv("peak_concurrency", self.peak_concurrency.to_string());
        kv("offload_bytes", self.offload_bytes.to_string());
        kv("reload_bytes", self.reload_bytes.to_string());
        kv("table_sync_bytes", self.table_sync_bytes.to_string());
        kv("pause_fraction", format!("{:.6}", self.pause_fraction));
        kv("pause_violations", self.pause_violations.to_string());
        kv("reranks", self.reranks.to_string());
        kv("deferred_reranks", self.deferred_reranks.to_string());
        kv("reloads", self.reloads.to_string());
        kv(
            "promoted_fraction",
            format!("{:.6}", self.promoted_fraction()),
        );
        kv("score_evaluations", self.score_evaluations.to_string());
        kv(
            "naive_score_evaluations",
            self.naive_score_evaluations.to_string(),
        );
        kv(
            "skipped_layer_scorings",
            self.skipped_layer_scorings.to_string(),
        );
        kv("ticks", self.ticks.to_string());
        out
    }

    /// One row per request.
    pub fn requests_csv(&self) -> String {
        let mut out = String::from("request,prompt_tokens,output_tokens,arrival_s,admitted_s,first_token_s,finish_s,ttft_s,tpot_s\n");
        for r in &self.requests {
            let tpot = r.tpot().map_or_else(String::new, |t| format!("{t:.6}"));
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                r.id,
                r.prompt_tokens,
                r.output_tokens,
                r.arrival_s,
                r.admitted_s,
                r.first_token_s,
                r.finish_s,
                r.ttft(),
                tpot
            );
        }
        out
    }
}
