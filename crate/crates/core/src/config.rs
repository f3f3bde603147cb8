//! Run configuration and its flat `key=value` file format.
//!
//! Every field of [`Config`] is a key. Lines starting with `#` and blank lines
//! are ignored; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invariant(String),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub page_size_tokens: u32,
    /// Top-K budget in pages.
    pub topk_pages: u32,
    pub unstable_fraction: f64,
    /// Decode steps between reranks of stable heads.
    pub rerank_period: u32,
    /// Temporal stability window, in decode steps.
    pub window_w: u32,
    /// Distance between consecutive window starts.
    pub window_stride: u32,
    pub num_layers: u16,
    pub kv_heads_per_layer: u16,
    pub head_dim: u32,
    pub fast_tier_capacity_bytes: u64,
    pub slow_tier_capacity_bytes: u64,
    pub link_bandwidth_bytes_per_s: f64,
    pub link_latency_s: f64,
    /// Transfers are split into chunks of at most this many bytes.
    pub transfer_chunk_bytes: u64,
    pub bytes_per_kv_element: u32,
    pub rng_seed: u64,
    /// Fixed cost of one batched decode step.
    pub step_overhead_s: f64,
    /// Decode attention cost per fast-tier byte touched.
    pub attn_s_per_byte: f64,
    pub prefill_s_per_token: f64,
}

impl Default for Config {
    /// Llama-3.1-8B shaped model (32 layers, 8 KV heads, head dim 128, fp16).
    fn default() -> Self {
        Self {
            page_size_tokens: 16,
            topk_pages: 64,
            unstable_fraction: 0.25,
            rerank_period: 16,
            window_w: 32,
            window_stride: 32,
            num_layers: 32,
            kv_heads_per_layer: 8,
            head_dim: 128,
            fast_tier_capacity_bytes: 64_000_000_000,
            slow_tier_capacity_bytes: 180_000_000_000,
            link_bandwidth_bytes_per_s: 32e9,
            link_latency_s: 10e-6,
            transfer_chunk_bytes: 1 << 20,
            bytes_per_kv_element: 2,
            rng_seed: 0,
            step_overhead_s: 0.010,
            attn_s_per_byte: 0.5e-12,
            prefill_s_per_token: 40e-6,
        }
    }
}

const KEYS: &[&str] = &[
    "page_size_tokens",
    "topk_pages",
    "unstable_fraction",
    "rerank_period",
    "window_w",
    "window_stride",
    "num_layers",
    "kv_heads_per_layer",
    "head_dim",
    "fast_tier_capacity_bytes",
    "slow_tier_capacity_bytes",
    "link_bandwidth_bytes_per_s",
    "link_latency_s",
    "transfer_chunk_bytes",
    "bytes_per_kv_element",
    "rng_seed",
    "step_overhead_s",
    "attn_s_per_byte",
    "prefill_s_per_token",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl Config {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn total_heads(&self) -> usize {
        self.num_layers as usize * self.kv_heads_per_layer as usize
    }

    /// Number of heads classified unstable: `round(unstable_fraction * L * H)`.
    pub fn unstable_head_count(&self) -> usize {
        (self.unstable_fraction * self.total_heads() as f64).round() as usize
    }

    /// Bytes of one page of one head, keys and values together.
    pub fn page_bytes(&self) -> u64 {
        self.page_size_tokens as u64 * self.head_dim as u64 * 2 * self.bytes_per_kv_element as u64
    }

    /// Bytes of one page's min/max key metadata.
    pub fn minmax_page_bytes(&self) -> u64 {
        2 * self.head_dim as u64 * self.bytes_per_kv_element as u64
    }

    /// Pages needed for `tokens` tokens, counting a trailing partial page.
    pub fn pages_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(self.page_size_tokens as u64)
    }

    /// Assign a single field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key.trim() {
            "page_size_tokens" => self.page_size_tokens = parse(key, v)?,
            "topk_pages" => self.topk_pages = parse(key, v)?,
            "unstable_fraction" => self.unstable_fraction = parse(key, v)?,
            "rerank_period" => self.rerank_period = parse(key, v)?,
            "window_w" => self.window_w = parse(key, v)?,
            "window_stride" => self.window_stride = parse(key, v)?,
            "num_layers" => self.num_layers = parse(key, v)?,
            "kv_heads_per_layer" => self.kv_heads_per_layer = parse(key, v)?,
            "head_dim" => self.head_dim = parse(key, v)?,
            "fast_tier_capacity_bytes" => self.fast_tier_capacity_bytes = parse(key, v)?,
            "slow_tier_capacity_bytes" => self.slow_tier_capacity_bytes = parse(key, v)?,
            "link_bandwidth_bytes_per_s" => self.link_bandwidth_bytes_per_s = parse(key, v)?,
            "link_latency_s" => self.link_latency_s = parse(key, v)?,
            "transfer_chunk_bytes" => self.transfer_chunk_bytes = parse(key, v)?,
            "bytes_per_kv_element" => self.bytes_per_kv_element = parse(key, v)?,
            "rng_seed" => self.rng_seed = parse(key, v)?,
            "step_overhead_s" => self.step_overhead_s = parse(key, v)?,
            "attn_s_per_byte" => self.attn_s_per_byte = parse(key, v)?,
            "prefill_s_per_token" => self.prefill_s_per_token = parse(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Apply `key=value` override strings in order, then validate.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self, ConfigError> {
        for (i, o) in overrides.iter().enumerate() {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: o.to_string(),
            })?;
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("page_size_tokens", self.page_size_tokens.to_string());
        put("topk_pages", self.topk_pages.to_string());
        put("unstable_fraction", self.unstable_fraction.to_string());
        put("rerank_period", self.rerank_period.to_string());
        put("window_w", self.window_w.to_string());
        put("window_stride", self.window_stride.to_string());
        put("num_layers", self.num_layers.to_string());
        put("kv_heads_per_layer", self.kv_heads_per_layer.to_string());
        put("head_dim", self.head_dim.to_string());
        put(
            "fast_tier_capacity_bytes",
            self.fast_tier_capacity_bytes.to_string(),
        );
        put(
            "slow_tier_capacity_bytes",
            self.slow_tier_capacity_bytes.to_string(),
        );
        put(
            "link_bandwidth_bytes_per_s",
            self.link_bandwidth_bytes_per_s.to_string(),
        );
        put("link_latency_s", self.link_latency_s.to_string());
        put(
            "transfer_chunk_bytes",
            self.transfer_chunk_bytes.to_string(),
        );
        put(
            "bytes_per_kv_element",
            self.bytes_per_kv_element.to_string(),
        );
        put("rng_seed", self.rng_seed.to_string());
        put("step_overhead_s", self.step_overhead_s.to_string());
        put("attn_s_per_byte", self.attn_s_per_byte.to_string());
        put("prefill_s_per_token", self.prefill_s_per_token.to_string());
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: &str| Err(ConfigError::Invariant(msg.to_string()));
        if self.page_size_tokens < 1 {
            return fail("page_size_tokens must be >= 1");
        }
        if self.topk_pages < 1 {
            return fail("topk_pages must be >= 1");
        }
        if !(self.unstable_fraction > 0.0 && self.unstable_fraction < 1.0) {
            return fail("unstable_fraction must lie in (0, 1)");
        }
        if self.rerank_period < 1 {
            return fail("rerank_period must be >= 1");
        }
        if self.window_w < 2 {
            return fail("window_w must be >= 2");
        }
        if self.window_stride < 1 {
            return fail("window_stride must be >= 1");
        }
        if self.num_layers < 1 || self.kv_heads_per_layer < 1 || self.head_dim < 1 {
            return fail("num_layers, kv_heads_per_layer and head_dim must be >= 1");
        }
        if self.bytes_per_kv_element < 1 {
            return fail("bytes_per_kv_element must be >= 1");
        }
        if self.fast_tier_capacity_bytes == 0 || self.slow_tier_capacity_bytes == 0 {
            return fail("tier capacities must be positive");
        }
        if !self.link_bandwidth_bytes_per_s.is_finite() || self.link_bandwidth_bytes_per_s <= 0.0 {
            return fail("link_bandwidth_bytes_per_s must be positive");
        }
        if self.link_latency_s.is_nan() || self.link_latency_s < 0.0 {
            return fail("link_latency_s must be non-negative");
        }
        if self.transfer_chunk_bytes == 0 {
            return fail("transfer_chunk_bytes must be positive");
        }
        if !(self.step_overhead_s > 0.0
            && self.attn_s_per_byte > 0.0
            && self.prefill_s_per_token > 0.0)
        {
            return fail("cost model constants must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
        assert_eq!(Config::default().unstable_head_count(), 64);
    }

    #[test]
    fn text_round_trip() {
        let cfg = Config {
            topk_pages: 128,
            link_latency_s: 2.5e-6,
            ..Config::default()
        };
        let back = Config::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_key() {
        let err = Config::parse_str("page_size_tokens=16\nbogus=1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "bogus"));
    }

    #[test]
    fn rejects_invariant_violations() {
        assert!(Config::parse_str("unstable_fraction=1.0").is_err());
        assert!(Config::parse_str("window_w=1").is_err());
        assert!(Config::parse_str("topk_pages=0").is_err());
        assert!(Config::parse_str("link_bandwidth_bytes_per_s=0").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = Config::parse_str("# tiny\n\nnum_layers = 2\n").unwrap();
        assert_eq!(cfg.num_layers, 2);
    }

    #[test]
    fn page_bytes_fp16() {
        // 16 tokens * 128 dims * (K and V) * 2 bytes
        assert_eq!(Config::default().page_bytes(), 8192);
        assert_eq!(Config::default().pages_for(1000), 63);
    }
}
